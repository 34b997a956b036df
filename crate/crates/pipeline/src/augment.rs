//! Per-image augmentation loop and the dataset driver around it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stda_adversarial::params::load_predictor;
use stda_adversarial::{predictor_forward, PredictorParams};
use stda_core::io::{load_mask, load_patch, save_patch};
use stda_core::warp::warp;
use stda_core::{
    compose, constrain_shape, deform, paste_into_scene, sample_placement, BlendMap, GammaProfile, Mask, Patch,
    PlacementModel, SceneImage, SolverConfig,
};

use crate::dataset::{
    load_bank, load_manifest, save_annotations, write_jsonl, AnnotationRecord, ImageEntry, Provenance,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeformMode {
    /// Per-instance optimisation of the field; blending map fixed at 1.
    Solver,
    /// One forward pass of a trained predictor.
    Predictor,
}

/// Law of the number of synthetic instances per image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum CountLaw {
    Uniform { min: usize, max: usize },
}

impl Default for CountLaw {
    fn default() -> Self {
        CountLaw::Uniform { min: 1, max: 5 }
    }
}

impl CountLaw {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match *self {
            CountLaw::Uniform { min: 1, max: 5 } => stda_core::sample_count(rng),
            CountLaw::Uniform { min, max } => rng.gen_range(min..=max),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            CountLaw::Uniform { min, max } if min <= max => Ok(()),
            CountLaw::Uniform { .. } => Err(Error::Config("count law needs min <= max".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub seed: u64,
    pub placement_model: Option<PathBuf>,
    /// Exemplar bank (JSON Lines of patch/mask paths).
    pub bank: Option<PathBuf>,
    pub mode: DeformMode,
    pub predictor_params: Option<PathBuf>,
    pub gamma: GammaProfile,
    /// Allowed ratio of target to exemplar mask height.
    pub compatibility: (f64, f64),
    pub count_law: CountLaw,
    pub patch_size: usize,
    pub solver: SolverConfig,
    /// Placement draws per instance before the instance is skipped.
    pub placement_retries: usize,
    /// Number of before/after previews to write.
    pub preview: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            placement_model: None,
            bank: None,
            mode: DeformMode::Solver,
            predictor_params: None,
            gamma: GammaProfile::LinearRamp,
            compatibility: (0.75, 1.33),
            count_law: CountLaw::default(),
            patch_size: 64,
            solver: SolverConfig {
                max_iters: 40,
                ..SolverConfig::default()
            },
            placement_retries: 8,
            preview: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.compatibility;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite()) {
            return Err(Error::Config(format!(
                "compatibility window ({lo}, {hi}) must satisfy 0 < lo <= 1 <= hi"
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        self.count_law.validate()?;
        self.solver.validate()?;
        Ok(())
    }
}

/// Exemplar at working resolution.
#[derive(Clone, Debug)]
pub struct Exemplar {
    pub id: String,
    pub patch: Patch,
    pub mask: Mask,
    height: usize,
}

impl Exemplar {
    pub fn new(id: impl Into<String>, patch: &Patch, mask: &Mask, size: usize) -> Result<Self> {
        let mask = mask.resize(size, size);
        let (top, bottom) = mask
            .vertical_extent(0.5)
            .ok_or_else(|| Error::Config("exemplar mask is empty".into()))?;
        Ok(Self {
            id: id.into(),
            patch: patch.resize(size, size),
            mask,
            height: bottom - top + 1,
        })
    }
}

/// How instances are deformed.
#[derive(Clone, Debug)]
pub enum Deformer {
    Solver(SolverConfig),
    Predictor(Box<PredictorParams>),
}

/// Everything one image's augmentation needs besides the image itself.
#[derive(Clone, Debug)]
pub struct Context {
    pub exemplars: Vec<Exemplar>,
    pub model: PlacementModel,
    pub deformer: Deformer,
    pub config: AugmentConfig,
}

/// Why an instance was not produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skip {
    pub image: String,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct ImageOutcome {
    pub scene: SceneImage,
    /// Original records followed by the synthetic ones.
    pub records: Vec<AnnotationRecord>,
    pub requested: usize,
    pub skipped: Vec<Skip>,
}

/// Per-image stream keyed by the global seed and the image id, so results
/// do not depend on processing order.
pub fn image_rng(seed: u64, image_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(image_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn compatible_shapes(exemplars: &[Exemplar], i: usize, (lo, hi): (f64, f64)) -> Vec<usize> {
    let hi_ex = exemplars[i].height as f64;
    (0..exemplars.len())
        .filter(|&j| {
            let r = exemplars[j].height as f64 / hi_ex;
            j != i && r >= lo && r <= hi
        })
        .collect()
}

/// Adds `n ~ count_law` deformed instances to `scene`.
pub fn augment_image(scene: &SceneImage, existing: &[AnnotationRecord], ctx: &Context) -> Result<ImageOutcome> {
    if ctx.exemplars.len() < 2 {
        return Err(Error::BankExhausted("the bank needs at least two exemplars".into()));
    }
    let cfg = &ctx.config;
    let (h, w) = (scene.height(), scene.width());
    let model = if (ctx.model.image_height, ctx.model.image_width) == (h, w) {
        ctx.model.clone()
    } else {
        ctx.model.rescaled(h, w)
    };
    let mut rng = image_rng(cfg.seed, &scene.id);
    let n = cfg.count_law.sample(&mut rng);
    let mut out = scene.clone();
    let mut records = existing.to_vec();
    let mut skipped = Vec::new();
    let size = cfg.patch_size;
    for _ in 0..n {
        let mut bbox = None;
        let mut last_err = None;
        for _ in 0..cfg.placement_retries.max(1) {
            match sample_placement(&model, &mut rng) {
                Ok(b) => {
                    bbox = Some(b);
                    break;
                }
                Err(e) => last_err = Some(e),
            }
        }
        let Some(bbox) = bbox else {
            skipped.push(Skip {
                image: scene.id.clone(),
                reason: format!("placement: {}", last_err.map(|e| e.to_string()).unwrap_or_default()),
            });
            continue;
        };
        let i = rng.gen_range(0..ctx.exemplars.len());
        let candidates = compatible_shapes(&ctx.exemplars, i, cfg.compatibility);
        if candidates.is_empty() {
            return Err(Error::BankExhausted(format!(
                "no shape within the compatibility window of exemplar {}",
                ctx.exemplars[i].id
            )));
        }
        let j = candidates[rng.gen_range(0..candidates.len())];
        let instance_seed: u64 = rng.gen();
        let (ex, shape) = (&ctx.exemplars[i], &ctx.exemplars[j]);

        let (x0, y0, x1, y1) = bbox.pixel_rect();
        let background = out
            .pixels
            .crop(y0 as usize, x0 as usize, (y1 - y0) as usize, (x1 - x0) as usize)?
            .resize(size, size);
        let (z_w, target, alpha) = match &ctx.deformer {
            Deformer::Solver(solver) => {
                let d = deform(&ex.patch, &ex.mask, &shape.mask, &cfg.gamma, solver)?;
                (d.patch, d.target, BlendMap::uniform(size, size))
            }
            Deformer::Predictor(params) => {
                let target = constrain_shape(&ex.mask, &shape.mask, &cfg.gamma)?;
                let (field, alpha) = predictor_forward(params, &ex.patch, &ex.mask, &target, &background)?;
                (warp(&ex.patch, &field)?, target, alpha)
            }
        };
        let generated = compose(&z_w, &target, &alpha, &background)?;
        out = paste_into_scene(&out, &generated, &bbox)?;
        let overlaps = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.bbox.overlaps(&bbox))
            .map(|(k, _)| k)
            .collect();
        records.push(AnnotationRecord::synthetic(
            scene.id.clone(),
            bbox,
            Provenance {
                exemplar: ex.id.clone(),
                shape: shape.id.clone(),
                seed: instance_seed,
                overlaps,
            },
        ));
    }
    Ok(ImageOutcome {
        scene: out,
        records,
        requested: n,
        skipped,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub images: usize,
    pub augmented: usize,
    pub failed: Vec<Skip>,
    pub skipped_instances: Vec<Skip>,
    pub synthetic_instances: usize,
    /// `histogram[n]` counts images that drew `n` instances.
    pub histogram: BTreeMap<usize, usize>,
    pub seconds: f64,
}

impl AugmentReport {
    pub fn is_clean(&self) -> bool {
        self.failed.is_empty()
    }
}

/// Written next to the augmented images so `eval` can find the sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub id: String,
    pub source: PathBuf,
    pub output: PathBuf,
}

pub const IMAGES_DIR: &str = "images";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const OUTPUTS_FILE: &str = "outputs.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const MODEL_FILE: &str = "placement.json";

/// Loads the bank, the placement model and (in predictor mode) the weights
/// named by `config`.
pub fn load_context(config: &AugmentConfig) -> Result<Context> {
    config.validate()?;
    let bank_path = config
        .bank
        .as_ref()
        .ok_or_else(|| Error::Config("no exemplar bank configured".into()))?;
    let exemplars = load_bank(bank_path)?
        .into_iter()
        .filter_map(|e| e.mask.map(|m| (e.id, e.patch, m)))
        .map(|(id, patch, mask)| {
            let patch = load_patch(&patch)?;
            let mask = load_mask(&mask)?;
            Exemplar::new(id, &patch, &mask, config.patch_size)
        })
        .collect::<Result<Vec<_>>>()?;
    let model = match &config.placement_model {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let m: PlacementModel = serde_json::from_str(&text)?;
            m.validate()?;
            m
        }
        None => PlacementModel::caltech(),
    };
    let deformer = match config.mode {
        DeformMode::Solver => Deformer::Solver(config.solver.clone()),
        DeformMode::Predictor => {
            let p = config
                .predictor_params
                .as_ref()
                .ok_or_else(|| Error::Config("predictor mode needs predictor_params".into()))?;
            Deformer::Predictor(Box::new(load_predictor(p)?))
        }
    };
    Ok(Context {
        exemplars,
        model,
        deformer,
        config: config.clone(),
    })
}

/// Augments every image of `manifest` into `out_dir`.
pub fn augment_dataset(manifest: &Path, out_dir: &Path, config: &AugmentConfig) -> Result<AugmentReport> {
    let entries = load_manifest(manifest)?;
    let ctx = load_context(config)?;
    augment_entries(&entries, out_dir, &ctx)
}

/// Thread pool capped by `STDA_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("STDA_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::Config(e.to_string()))
}

pub fn augment_entries(entries: &[ImageEntry], out_dir: &Path, ctx: &Context) -> Result<AugmentReport> {
    let start = Instant::now();
    let images_dir = out_dir.join(IMAGES_DIR);
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let preview_dir = out_dir.join("preview");
    if ctx.config.preview > 0 {
        std::fs::create_dir_all(&preview_dir).map_err(|e| Error::io(&preview_dir, e))?;
    }

    let run = |(k, entry): (usize, &ImageEntry)| -> std::result::Result<(ImageOutcome, OutputEntry), Skip> {
        let fail = |e: Error| Skip {
            image: entry.id.clone(),
            reason: e.to_string(),
        };
        let pixels = load_patch(&entry.path).map_err(|e| fail(e.into()))?;
        let scene = SceneImage::new(entry.id.clone(), pixels);
        let outcome = augment_image(&scene, &entry.annotations, ctx).map_err(fail)?;
        let output = images_dir.join(format!("{}.png", sanitize(&entry.id)));
        save_patch(&outcome.scene.pixels, &output).map_err(|e| fail(e.into()))?;
        if k < ctx.config.preview {
            let side = side_by_side(&scene.pixels, &outcome.scene.pixels);
            save_patch(&side, preview_dir.join(format!("{}.png", sanitize(&entry.id)))).map_err(|e| fail(e.into()))?;
        }
        Ok((
            outcome,
            OutputEntry {
                id: entry.id.clone(),
                source: entry.path.clone(),
                output: PathBuf::from(IMAGES_DIR).join(format!("{}.png", sanitize(&entry.id))),
            },
        ))
    };
    let results: Vec<_> = thread_pool()?.install(|| entries.par_iter().enumerate().map(run).collect());

    let mut report = AugmentReport {
        images: entries.len(),
        ..AugmentReport::default()
    };
    let mut records = Vec::new();
    let mut outputs = Vec::new();
    for (entry, result) in entries.iter().zip(results) {
        match result {
            Ok((outcome, output)) => {
                report.augmented += 1;
                *report.histogram.entry(outcome.requested).or_default() += 1;
                report.synthetic_instances += outcome.records.len() - entry.annotations.len();
                report.skipped_instances.extend(outcome.skipped);
                records.extend(outcome.records);
                outputs.push(output);
            }
            Err(skip) => {
                records.extend(entry.annotations.iter().cloned());
                report.failed.push(skip);
            }
        }
    }
    save_annotations(&records, out_dir.join(ANNOTATIONS_FILE))?;
    write_jsonl(&outputs, out_dir.join(OUTPUTS_FILE))?;
    let model_json = serde_json::to_string_pretty(&ctx.model)?;
    let model_path = out_dir.join(MODEL_FILE);
    std::fs::write(&model_path, model_json).map_err(|e| Error::io(&model_path, e))?;
    report.seconds = start.elapsed().as_secs_f64();
    let report_path = out_dir.join(REPORT_FILE);
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&report_path, e))?;
    Ok(report)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn side_by_side(before: &Patch, after: &Patch) -> Patch {
    let (h, w) = before.dims();
    Patch::from_fn(h, 2 * w, |c, y, x| {
        if x < w {
            before.get(c, y, x)
        } else {
            after.get(c, y, x - w)
        }
    })
}
