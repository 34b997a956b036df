//! Writes a procedural dataset to disk: street scenes with planted
//! pedestrians, their manifest, and an exemplar bank.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Map;

use stda_core::io::{save_mask, save_patch};
use stda_core::synth::{gen_scene, random_exemplar, SceneParams};

use crate::dataset::{write_jsonl, AnnotationRecord, BankEntry, ImageEntry};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const BANK_FILE: &str = "bank.jsonl";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub scenes: usize,
    pub exemplars: usize,
    pub backgrounds: usize,
    pub scene: SceneParams,
    pub exemplar_size: usize,
}

impl CorpusSpec {
    pub fn new(scenes: usize) -> Self {
        Self {
            scenes,
            exemplars: 32,
            backgrounds: 16,
            scene: SceneParams::small_street(240, 320),
            exemplar_size: 64,
        }
    }
}

pub fn write_corpus(spec: &CorpusSpec, seed: u64, out_dir: &Path) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for sub in ["scenes", "bank"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut bank = Vec::with_capacity(spec.exemplars);
    for k in 0..spec.exemplars {
        let ex = random_exemplar(spec.exemplar_size, spec.exemplar_size, &mut rng)?;
        let id = format!("ex{k:04}");
        let (patch, mask) = (format!("bank/{id}.png"), format!("bank/{id}_mask.png"));
        save_patch(&ex.patch, out_dir.join(&patch))?;
        save_mask(&ex.mask, out_dir.join(&mask))?;
        bank.push(BankEntry {
            id,
            patch: patch.into(),
            mask: Some(mask.into()),
            extra: Map::new(),
        });
    }
    let backdrop = SceneParams {
        pedestrians: 0,
        ..SceneParams::small_street(spec.exemplar_size, spec.exemplar_size)
    };
    for k in 0..spec.backgrounds {
        let id = format!("bg{k:04}");
        let patch = format!("bank/{id}.png");
        save_patch(&gen_scene(&backdrop, &mut rng)?.0, out_dir.join(&patch))?;
        bank.push(BankEntry {
            id,
            patch: patch.into(),
            mask: None,
            extra: Map::new(),
        });
    }
    write_jsonl(&bank, out_dir.join(BANK_FILE))?;

    let mut manifest = Vec::with_capacity(spec.scenes);
    for k in 0..spec.scenes {
        let id = format!("scene{k:05}");
        let mut params = spec.scene.clone();
        params.pedestrians = rng.gen_range(0..=3);
        let (pixels, boxes) = gen_scene(&params, &mut rng)?;
        let path = format!("scenes/{id}.png");
        save_patch(&pixels, out_dir.join(&path))?;
        manifest.push(ImageEntry {
            annotations: boxes
                .into_iter()
                .map(|b| AnnotationRecord::real(id.clone(), b))
                .collect(),
            id,
            path: path.into(),
            extra: Map::new(),
        });
    }
    write_jsonl(&manifest, out_dir.join(MANIFEST_FILE))?;
    let records: Vec<AnnotationRecord> = manifest.iter().flat_map(|e| e.annotations.iter().cloned()).collect();
    write_jsonl(&records, out_dir.join(ANNOTATIONS_FILE))?;
    Ok(())
}
