//! The U-shaped field/blend predictor and the three-block patch classifiers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use stda_core::blend::squash_alpha;
use stda_core::{BlendMap, Mask, Patch, Raster, WarpField};

use crate::tape::{to_field, Tape, Tensor, Var};
use crate::{Error, Result};

pub const LEAK: f64 = 0.2;
const KERNEL: usize = 3;
/// z (3) + s_i (1) + s_target (1) + background (3).
pub const PREDICTOR_INPUTS: usize = 8;

/// Named weight tensors, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor) {
        self.names.push(name);
        self.tensors.push(t);
    }

    /// He-uniform conv weight plus zero bias.
    fn conv<R: Rng + ?Sized>(&mut self, name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) {
        let fan_in = (cin * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w = (0..cout * cin * k * k).map(|_| rng.gen_range(-bound..bound)).collect();
        self.push(format!("{name}.w"), Tensor::new(cout, cin * k * k, 1, w));
        self.push(format!("{name}.b"), Tensor::zeros(cout, 1, 1));
    }

    fn zero_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.push(format!("{name}.w"), Tensor::zeros(cout, cin * k * k, 1));
        self.push(format!("{name}.b"), Tensor::zeros(cout, 1, 1));
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn shapes(&self) -> Vec<[usize; 3]> {
        self.tensors.iter().map(Tensor::shape).collect()
    }

    /// Rebuilds a set with the given shapes from a flat vector.
    pub fn from_flat(names: Vec<String>, shapes: &[[usize; 3]], flat: &[f64]) -> Result<Self> {
        let total: usize = shapes.iter().map(|s| s[0] * s[1] * s[2]).sum();
        if total != flat.len() || names.len() != shapes.len() {
            return Err(Error::Shape(format!("{} values for {total} weights", flat.len())));
        }
        let mut off = 0;
        let tensors = shapes
            .iter()
            .map(|&[c, h, w]| {
                let t = Tensor::new(c, h, w, flat[off..off + c * h * w].to_vec());
                off += c * h * w;
                t
            })
            .collect();
        Ok(Self { names, tensors })
    }

    /// Registers every tensor as a leaf on `tape`.
    pub fn attach(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.c, t.h, t.w)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetShape {
    pub blocks: usize,
    pub base_channels: usize,
    pub max_channels: usize,
}

impl UNetShape {
    pub const DESK: Self = Self {
        blocks: 4,
        base_channels: 16,
        max_channels: 128,
    };
    /// The full-size configuration: eight blocks as in pix2pix-style U-nets.
    pub const FULL: Self = Self {
        blocks: 8,
        base_channels: 64,
        max_channels: 512,
    };

    fn channels(&self, level: usize) -> usize {
        (self.base_channels << (level - 1)).min(self.max_channels)
    }

    /// Input side lengths must be multiples of this.
    pub fn granularity(&self) -> usize {
        1 << self.blocks
    }
}

/// Encoder–decoder weights. Layer order: `enc1..encN`, `decN-1..dec0`,
/// then the field and alpha heads.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams {
    pub shape: UNetShape,
    pub weights: ParamSet,
}

impl PredictorParams {
    /// Random trunk with zero heads, so the initial output is the identity
    /// field and a uniform blend of 1.
    pub fn init<R: Rng + ?Sized>(shape: UNetShape, rng: &mut R) -> Result<Self> {
        if shape.blocks == 0 || shape.base_channels == 0 {
            return Err(Error::Config("the U-net needs at least one block and channel".into()));
        }
        let mut p = ParamSet::new();
        let mut prev = PREDICTOR_INPUTS;
        for level in 1..=shape.blocks {
            let c = shape.channels(level);
            p.conv(&format!("enc{level}"), prev, c, KERNEL, rng);
            prev = c;
        }
        for level in (0..shape.blocks).rev() {
            let skip = if level == 0 {
                PREDICTOR_INPUTS
            } else {
                shape.channels(level)
            };
            let out = shape.channels(level.max(1));
            p.conv(&format!("dec{level}"), prev + skip, out, KERNEL, rng);
            prev = out;
        }
        p.zero_conv("field", prev, 2, KERNEL);
        p.zero_conv("alpha", prev, 1, KERNEL);
        Ok(Self { shape, weights: p })
    }

    /// Records the forward pass; returns the field `[2,h,w]` and raw alpha
    /// `[1,h,w]` nodes.
    pub fn graph(&self, tape: &mut Tape, w: &[Var], input: Var) -> (Var, Var) {
        let n = self.shape.blocks;
        let mut skips = vec![input];
        let mut x = input;
        for level in 0..n {
            let y = tape.conv(x, w[2 * level], w[2 * level + 1], KERNEL, 2, 1);
            x = tape.leaky_relu(y, LEAK);
            skips.push(x);
        }
        for (i, level) in (0..n).rev().enumerate() {
            let up = tape.upsample2(x);
            let cat = tape.concat(up, skips[level]);
            let j = 2 * (n + i);
            let y = tape.conv(cat, w[j], w[j + 1], KERNEL, 1, 1);
            x = tape.leaky_relu(y, LEAK);
        }
        let j = 4 * n;
        let field = tape.conv(x, w[j], w[j + 1], KERNEL, 1, 1);
        let alpha = tape.conv(x, w[j + 2], w[j + 3], KERNEL, 1, 1);
        (field, alpha)
    }
}

/// Stacks `(z, s_i, s_target, background)` into the predictor input.
pub fn predictor_input(z: &Tensor, s_i: &Tensor, s_target: &Tensor, background: &Tensor) -> Tensor {
    let mut data = Vec::with_capacity(PREDICTOR_INPUTS * z.plane());
    for t in [z, s_i, s_target, background] {
        data.extend_from_slice(&t.data);
    }
    Tensor::new(PREDICTOR_INPUTS, z.h, z.w, data)
}

/// One forward pass: warping field and squashed blending map.
pub fn predictor_forward(
    params: &PredictorParams,
    z_i: &Patch,
    s_i: &Mask,
    s_target: &Mask,
    background: &Patch,
) -> Result<(WarpField, BlendMap)> {
    let dims = z_i.dims();
    for other in [s_i.dims(), s_target.dims(), background.dims()] {
        if other != dims {
            return Err(Error::Core(stda_core::Error::DimensionMismatch {
                expected: dims,
                actual: other,
            }));
        }
    }
    let g = params.shape.granularity();
    if !dims.0.is_multiple_of(g) || !dims.1.is_multiple_of(g) || dims.0 == 0 || dims.1 == 0 {
        return Err(Error::Shape(format!(
            "patch {}x{} is not a positive multiple of {g}",
            dims.0, dims.1
        )));
    }
    let mut tape = Tape::new();
    let w = params.weights.attach(&mut tape);
    let x = predictor_input(
        &Tensor::from_grid(z_i.grid()),
        &Tensor::from_grid(s_i.grid()),
        &Tensor::from_grid(s_target.grid()),
        &Tensor::from_grid(background.grid()),
    );
    let input = tape.leaf(x);
    let (field, alpha) = params.graph(&mut tape, &w, input);
    let field = to_field(tape.value(field));
    let alpha = squash_alpha(&tape.value(alpha).to_grid());
    Ok((field, alpha))
}

/// Three stride-2 conv blocks, global pooling and a logistic unit.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub weights: ParamSet,
}

pub const CLASSIFIER_CHANNELS: [usize; 3] = [16, 32, 64];

impl ClassifierParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut p = ParamSet::new();
        let mut prev = 3;
        for (i, &c) in CLASSIFIER_CHANNELS.iter().enumerate() {
            p.conv(&format!("block{}", i + 1), prev, c, KERNEL, rng);
            prev = c;
        }
        p.conv("head", prev, 1, 1, rng);
        Self { weights: p }
    }

    /// Records the forward pass on a `[3,h,w]` patch; returns a probability.
    pub fn graph(&self, tape: &mut Tape, w: &[Var], patch: Var) -> Var {
        let mut x = patch;
        for i in 0..CLASSIFIER_CHANNELS.len() {
            let y = tape.conv(x, w[2 * i], w[2 * i + 1], KERNEL, 2, 1);
            x = tape.leaky_relu(y, LEAK);
        }
        let pooled = tape.spatial_mean(x);
        let j = 2 * CLASSIFIER_CHANNELS.len();
        let logit = tape.conv(pooled, w[j], w[j + 1], 1, 1, 0);
        tape.sigmoid(logit)
    }

    pub fn probability(&self, patch: &Patch) -> f64 {
        let mut tape = Tape::new();
        let w = self.weights.attach(&mut tape);
        let x = tape.leaf(Tensor::from_grid(patch.grid()));
        let p = self.graph(&mut tape, &w, x);
        tape.scalar(p)
    }
}

/// Real-vs-generated classifier `D`.
pub type DiscriminatorParams = ClassifierParams;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use stda_core::identity_field;

    fn inputs(n: usize) -> (Patch, Mask, Mask, Patch) {
        let z = Patch::from_fn(n, n, |c, y, x| ((c + 2 * y + 3 * x) % 11) as f64 / 11.0);
        let s = Mask::from_predicate(n, n, |y, x| y > n / 4 && x > n / 3 && x < 2 * n / 3);
        let t = Mask::from_predicate(n, n, |y, x| y > n / 5 && x > n / 4 && x < 3 * n / 4);
        let b = Patch::filled(n, n, [0.3, 0.4, 0.5]);
        (z, s, t, b)
    }

    #[test]
    fn zero_heads_give_identity() {
        let p = PredictorParams::init(UNetShape::DESK, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (z, s, t, b) = inputs(32);
        let (field, alpha) = predictor_forward(&p, &z, &s, &t, &b).unwrap();
        assert_eq!(field, identity_field(32, 32));
        assert!(alpha.values().iter().all(|&a| a == 1.0));
    }

    #[test]
    fn forward_is_deterministic_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = PredictorParams::init(UNetShape::DESK, &mut rng).unwrap();
        for t in p.weights.tensors.iter_mut().rev().take(4) {
            t.data.iter_mut().for_each(|v| *v = rng.gen_range(-3.0..3.0));
        }
        let (z, s, t, b) = inputs(32);
        let (f1, a1) = predictor_forward(&p, &z, &s, &t, &b).unwrap();
        let (f2, a2) = predictor_forward(&p, &z, &s, &t, &b).unwrap();
        assert_eq!((&f1, &a1), (&f2, &a2));
        assert_eq!(f1.dims(), (32, 32));
        assert!(f1.max_abs() > 0.0);
        assert!(a1.values().iter().all(|a| (0.8..=1.2).contains(a)));
    }

    #[test]
    fn forward_rejects_bad_sizes() {
        let p = PredictorParams::init(UNetShape::DESK, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (z, s, t, b) = inputs(24);
        assert!(predictor_forward(&p, &z, &s, &t, &b).is_err());
        let (z, s, _, b) = inputs(32);
        assert!(predictor_forward(&p, &z, &s, &Mask::zeros(16, 32), &b).is_err());
    }

    #[test]
    fn classifier_outputs_probability() {
        let d = ClassifierParams::init(&mut ChaCha8Rng::seed_from_u64(2));
        let (z, ..) = inputs(64);
        let p = d.probability(&z);
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn flat_roundtrip() {
        let p = PredictorParams::init(UNetShape::DESK, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let flat = p.weights.flatten();
        assert_eq!(flat.len(), p.weights.scalar_count());
        let back = ParamSet::from_flat(p.weights.names.clone(), &p.weights.shapes(), &flat).unwrap();
        assert_eq!(back, p.weights);
    }
}
