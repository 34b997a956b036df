//! Alternating optimisation of the predictor against `D` and `R`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use stda_core::synth::{gen_scene, random_exemplar, SceneParams};
use stda_core::{constrain_shape, GammaProfile, Mask, Patch, Raster};

use crate::nets::{predictor_input, ClassifierParams, ParamSet, PredictorParams, UNetShape};
use crate::tape::{Tape, Tensor, Var};
use crate::{Error, Result};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub shape: f64,
    pub cyc: f64,
    pub adv: f64,
    pub hpm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            shape: 100.0,
            cyc: 0.5,
            adv: 1.0,
            hpm: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Adam step size. The full-scale schedule uses 1e-5 over 80 epochs; a
    /// few thousand desk steps need a larger one.
    pub learning_rate: f64,
    pub steps: usize,
    /// `D` and `R` are each updated once per this many predictor updates.
    pub d_r_update_period: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub unet: UNetShape,
    pub weights: LossWeights,
    pub gamma: GammaProfile,
    /// Trailing steps averaged for the final loss in the report.
    pub report_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            steps: 2000,
            d_r_update_period: 40,
            batch_size: 2,
            patch_size: 64,
            seed: 0,
            unet: UNetShape::DESK,
            weights: LossWeights::default(),
            gamma: GammaProfile::LinearRamp,
            report_window: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_r_update_period == 0 {
            return Err(Error::Config("d_r_update_period must be at least 1".into()));
        }
        if self.batch_size == 0 || self.report_window == 0 {
            return Err(Error::Config("batch size and report window must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        let g = self.unet.granularity();
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(g) {
            return Err(Error::Config(format!(
                "patch size {} must be a positive multiple of {g}",
                self.patch_size
            )));
        }
        Ok(())
    }
}

/// `log D(real) + log(1 - D(generated))`, probabilities clamped to `[eps, 1-eps]`.
pub fn loss_adv(d_real: f64, d_generated: f64) -> f64 {
    clamp_p(d_real).ln() + (1.0 - clamp_p(d_generated)).ln()
}

/// `log(1 - R(generated)) + log R(real) + log(1 - R(background))`, clamped likewise.
pub fn loss_hpm(r_generated: f64, r_real: f64, r_background: f64) -> f64 {
    (1.0 - clamp_p(r_generated)).ln() + clamp_p(r_real).ln() + (1.0 - clamp_p(r_background)).ln()
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Batch-averaged [`loss_adv`] under classifier `d`.
pub fn batch_loss_adv(d: &ClassifierParams, real: &[Patch], generated: &[Patch]) -> f64 {
    let n = real.len().min(generated.len()).max(1) as f64;
    real.iter()
        .zip(generated)
        .map(|(r, g)| loss_adv(d.probability(r), d.probability(g)))
        .sum::<f64>()
        / n
}

/// Batch-averaged [`loss_hpm`] under classifier `r`.
pub fn batch_loss_hpm(r: &ClassifierParams, generated: &[Patch], real: &[Patch], background: &[Patch]) -> f64 {
    let n = generated.len().min(real.len()).min(background.len()).max(1) as f64;
    generated
        .iter()
        .zip(real)
        .zip(background)
        .map(|((g, z), b)| loss_hpm(r.probability(g), r.probability(z), r.probability(b)))
        .sum::<f64>()
        / n
}

/// One training example at the configured patch size.
#[derive(Clone, Debug)]
pub struct Sample {
    pub z: Tensor,
    pub s_i: Tensor,
    pub s_target: Tensor,
    pub background: Tensor,
}

impl Sample {
    /// Resizes everything to `size` and constrains `s_j` towards `s_i`.
    pub fn new(
        z: &Patch,
        s_i: &Mask,
        s_j: &Mask,
        background: &Patch,
        size: usize,
        gamma: &GammaProfile,
    ) -> Result<Self> {
        let s_i = s_i.resize(size, size);
        let target = constrain_shape(&s_i, &s_j.resize(size, size), gamma)?;
        Ok(Self {
            z: Tensor::from_grid(z.resize(size, size).grid()),
            s_i: Tensor::from_grid(s_i.grid()),
            s_target: Tensor::from_grid(target.grid()),
            background: Tensor::from_grid(background.resize(size, size).grid()),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub shape: f64,
    pub cyc: f64,
    pub adv: f64,
    pub hpm: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &Self, s: f64) {
        self.shape += s * o.shape;
        self.cyc += s * o.cyc;
        self.adv += s * o.adv;
        self.hpm += s * o.hpm;
        self.total += s * o.total;
    }
}

/// Full predictor objective on one sample with `D` and `R` held fixed.
/// Returns the losses, the gradient for every predictor weight and the
/// composed patch.
pub fn predictor_objective(
    params: &PredictorParams,
    d: &ClassifierParams,
    r: &ClassifierParams,
    sample: &Sample,
    weights: &LossWeights,
) -> (LossBreakdown, Vec<Tensor>, Tensor) {
    let mut t = Tape::new();
    let w = params.weights.attach(&mut t);
    let z = t.leaf(sample.z.clone());
    let s_i = t.leaf(sample.s_i.clone());
    let s_t = t.leaf(sample.s_target.clone());
    let b = t.leaf(sample.background.clone());

    let x1 = t.leaf(predictor_input(
        &sample.z,
        &sample.s_i,
        &sample.s_target,
        &sample.background,
    ));
    let (field, raw_alpha) = params.graph(&mut t, &w, x1);
    let z_w = t.warp(z, field);
    let s_w = t.warp(s_i, field);
    let squashed = t.tanh(raw_alpha);
    let alpha = t.affine(squashed, 0.2, 1.0);
    let weight = t.mul(s_t, alpha);
    let diff = t.sub(z_w, b);
    let fg = t.mul(diff, weight);
    let blended = t.add(b, fg);
    let generated = t.clamp(blended, 0.0, 1.0);

    // Second pass deforms the result back towards s_i.
    let zs = t.concat(z_w, s_w);
    let zss = t.concat(zs, s_i);
    let x2 = t.concat(zss, b);
    let (back, _) = params.graph(&mut t, &w, x2);
    let z_back = t.warp(z_w, back);
    let s_back = t.warp(s_w, back);

    let shape = t.l1_mean(s_t, s_w);
    let cyc_s = t.l1_mean(s_i, s_back);
    let cyc_z = t.l1_mean(z, z_back);
    let cyc = t.add(cyc_s, cyc_z);

    let real = classify(d, &sample.z);
    let adv_gen = log_one_minus(&mut t, d, generated);
    let adv_value = t.scalar(adv_gen) + clamp_p(real).ln();

    let r_real = classify(r, &sample.z);
    let r_back = classify(r, &sample.background);
    let hpm_gen = log_one_minus(&mut t, r, generated);
    let hpm_value = t.scalar(hpm_gen) + clamp_p(r_real).ln() + (1.0 - clamp_p(r_back)).ln();

    let a = t.affine(shape, weights.shape, 0.0);
    let c = t.affine(cyc, weights.cyc, 0.0);
    let ac = t.add(a, c);
    let adv_w = t.affine(adv_gen, weights.adv, 0.0);
    let hpm_w = t.affine(hpm_gen, weights.hpm, 0.0);
    let acd = t.add(ac, adv_w);
    let total = t.add(acd, hpm_w);

    let losses = LossBreakdown {
        shape: t.scalar(shape),
        cyc: t.scalar(cyc),
        adv: adv_value,
        hpm: hpm_value,
        total: weights.shape * t.scalar(shape)
            + weights.cyc * t.scalar(cyc)
            + weights.adv * adv_value
            + weights.hpm * hpm_value,
    };
    let grads = t.backward(total);
    let g = w
        .iter()
        .zip(&params.weights.tensors)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.c, p.h, p.w)))
        .collect();
    (losses, g, t.value(generated).clone())
}

fn classify(net: &ClassifierParams, x: &Tensor) -> f64 {
    let mut t = Tape::new();
    let w = net.weights.attach(&mut t);
    let x = t.leaf(x.clone());
    let p = net.graph(&mut t, &w, x);
    t.scalar(p)
}

/// `log(1 - clamp(net(x)))` recorded on `t`.
fn log_one_minus(t: &mut Tape, net: &ClassifierParams, x: Var) -> Var {
    let w = net.weights.attach(t);
    let p = net.graph(t, &w, x);
    let pc = t.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let q = t.affine(pc, -1.0, 1.0);
    t.log(q)
}

/// Gradient of `sum_k sign_k * log(q_k)` over labelled inputs, where
/// `q = p` for positives and `1 - p` for negatives; `sign` selects ascent.
fn classifier_gradient(net: &ClassifierParams, batch: &[(&Tensor, bool)], scale: f64) -> Vec<Tensor> {
    let mut acc = net.weights.zeros_like();
    for &(x, positive) in batch {
        let mut t = Tape::new();
        let w = net.weights.attach(&mut t);
        let xv = t.leaf(x.clone());
        let p = net.graph(&mut t, &w, xv);
        let pc = t.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
        let q = if positive { pc } else { t.affine(pc, -1.0, 1.0) };
        let l = t.log(q);
        // Ascent on the log-likelihood is descent on its negation.
        let obj = t.affine(l, -scale, 0.0);
        let g = t.backward(obj);
        for (a, &v) in acc.iter_mut().zip(&w) {
            if let Some(gv) = g.get(v) {
                a.data.iter_mut().zip(&gv.data).for_each(|(x, y)| *x += y);
            }
        }
    }
    acc
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Training banks: exemplars `(z_i, s_i)`, target shapes and background crops.
#[derive(Clone, Debug, Default)]
pub struct Banks {
    pub exemplars: Vec<(Patch, Mask)>,
    pub shapes: Vec<Mask>,
    pub backgrounds: Vec<Patch>,
}

impl Banks {
    /// Procedural banks: `n` exemplars, `n` target shapes and `n` background
    /// crops of `size x size`.
    pub fn synthetic<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Result<Self> {
        let mut banks = Self::default();
        let backdrop = SceneParams {
            pedestrians: 0,
            ..SceneParams::small_street(size, size)
        };
        for _ in 0..n {
            let ex = random_exemplar(size, size, rng)?;
            banks.exemplars.push((ex.patch, ex.mask));
            banks.shapes.push(random_exemplar(size, size, rng)?.mask);
            banks.backgrounds.push(gen_scene(&backdrop, rng)?.0);
        }
        Ok(banks)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub total: Vec<f64>,
    pub shape: Vec<f64>,
    pub cyc: Vec<f64>,
    pub adv: Vec<f64>,
    pub hpm: Vec<f64>,
    pub d_updates: usize,
    pub r_updates: usize,
    /// Batch-mean total loss at step 0.
    pub initial_loss: f64,
    /// Mean total loss over the trailing report window.
    pub final_loss: f64,
    /// `1 - final / initial`.
    pub reduction: f64,
    pub seconds: f64,
}

/// Trained networks.
#[derive(Clone, Debug)]
pub struct Trained {
    pub predictor: PredictorParams,
    pub discriminator: ClassifierParams,
    pub classifier: ClassifierParams,
}

pub fn train(banks: &Banks, config: &TrainConfig) -> Result<(Trained, TrainReport)> {
    config.validate()?;
    if banks.exemplars.is_empty() || banks.shapes.is_empty() || banks.backgrounds.is_empty() {
        return Err(Error::Config("every bank needs at least one entry".into()));
    }
    let start = Instant::now();
    let size = config.patch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut predictor = PredictorParams::init(config.unet, &mut rng)?;
    let mut d = ClassifierParams::init(&mut rng);
    let mut r = ClassifierParams::init(&mut rng);
    let mut opt_p = Adam::new(&predictor.weights, config.learning_rate);
    let mut opt_d = Adam::new(&d.weights, config.learning_rate);
    let mut opt_r = Adam::new(&r.weights, config.learning_rate);

    let exemplars: Vec<(Patch, Mask)> = banks
        .exemplars
        .iter()
        .map(|(z, s)| (z.resize(size, size), s.resize(size, size)))
        .collect();
    let shapes: Vec<Mask> = banks.shapes.iter().map(|s| s.resize(size, size)).collect();
    let backgrounds: Vec<Patch> = banks.backgrounds.iter().map(|b| b.resize(size, size)).collect();

    let mut report = TrainReport {
        steps: 0,
        total: Vec::with_capacity(config.steps),
        shape: Vec::with_capacity(config.steps),
        cyc: Vec::with_capacity(config.steps),
        adv: Vec::with_capacity(config.steps),
        hpm: Vec::with_capacity(config.steps),
        d_updates: 0,
        r_updates: 0,
        initial_loss: f64::NAN,
        final_loss: f64::NAN,
        reduction: f64::NAN,
        seconds: 0.0,
    };
    let scale = 1.0 / config.batch_size as f64;
    for step in 0..config.steps {
        let batch: Vec<Sample> = (0..config.batch_size)
            .map(|_| {
                let (z, s_i) = &exemplars[rng.gen_range(0..exemplars.len())];
                let s_j = &shapes[rng.gen_range(0..shapes.len())];
                let b = &backgrounds[rng.gen_range(0..backgrounds.len())];
                Sample::new(z, s_i, s_j, b, size, &config.gamma)
            })
            .collect::<Result<_>>()?;

        let mut grads = predictor.weights.zeros_like();
        let mut mean = LossBreakdown::default();
        let mut generated = Vec::with_capacity(batch.len());
        for sample in &batch {
            let (losses, g, gen) = predictor_objective(&predictor, &d, &r, sample, &config.weights);
            mean.add_scaled(&losses, scale);
            for (a, gv) in grads.iter_mut().zip(&g) {
                a.data.iter_mut().zip(&gv.data).for_each(|(x, y)| *x += scale * y);
            }
            generated.push(gen);
        }
        if !mean.total.is_finite() || grads.iter().any(|g| g.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged {
                step,
                checkpoint: Box::new(predictor),
            });
        }
        report.total.push(mean.total);
        report.shape.push(mean.shape);
        report.cyc.push(mean.cyc);
        report.adv.push(mean.adv);
        report.hpm.push(mean.hpm);
        opt_p.step(&mut predictor.weights, &grads);
        report.steps = step + 1;

        if (step + 1) % config.d_r_update_period == 0 {
            // D separates exemplars from composed patches. R ascends the whole
            // hard-positive objective: exemplars are positives, composed
            // patches and background crops negatives.
            let mut d_batch: Vec<(&Tensor, bool)> = batch.iter().map(|s| (&s.z, true)).collect();
            d_batch.extend(generated.iter().map(|g| (g, false)));
            let gd = classifier_gradient(&d, &d_batch, scale);
            opt_d.step(&mut d.weights, &gd);
            report.d_updates += 1;

            let mut r_batch: Vec<(&Tensor, bool)> = batch.iter().map(|s| (&s.z, true)).collect();
            r_batch.extend(generated.iter().map(|g| (g, false)));
            r_batch.extend(batch.iter().map(|s| (&s.background, false)));
            let gr = classifier_gradient(&r, &r_batch, scale);
            opt_r.step(&mut r.weights, &gr);
            report.r_updates += 1;
        }
    }
    if let Some(&first) = report.total.first() {
        let window = config.report_window.min(report.total.len());
        let tail = &report.total[report.total.len() - window..];
        report.initial_loss = first;
        report.final_loss = tail.iter().sum::<f64>() / window as f64;
        report.reduction = 1.0 - report.final_loss / report.initial_loss;
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok((
        Trained {
            predictor,
            discriminator: d,
            classifier: r,
        },
        report,
    ))
}
