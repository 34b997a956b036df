//! JSON Lines manifests, annotation files and exemplar banks.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use stda_core::BoundingBox;

use crate::{Error, Result};

pub const SYNTHETIC_LOSS_WEIGHT: f64 = 0.1;
pub const REAL_LOSS_WEIGHT: f64 = 1.0;

/// Where a synthetic instance came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub exemplar: String,
    pub shape: String,
    pub seed: u64,
    /// Indices (within the image's record list) of earlier boxes this one overlaps.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overlaps: Vec<usize>,
}

/// One box on one image. Fields this crate does not know about are kept
/// and written back unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: String,
    #[serde(flatten)]
    pub bbox: BoundingBox,
    #[serde(default)]
    pub synthetic: bool,
    #[serde(default = "real_weight")]
    pub loss_weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

fn real_weight() -> f64 {
    REAL_LOSS_WEIGHT
}

impl AnnotationRecord {
    pub fn real(image: impl Into<String>, bbox: BoundingBox) -> Self {
        Self {
            image: image.into(),
            bbox,
            synthetic: false,
            loss_weight: REAL_LOSS_WEIGHT,
            provenance: None,
            extra: Map::new(),
        }
    }

    pub fn synthetic(image: impl Into<String>, bbox: BoundingBox, provenance: Provenance) -> Self {
        Self {
            image: image.into(),
            bbox,
            synthetic: true,
            loss_weight: SYNTHETIC_LOSS_WEIGHT,
            provenance: Some(provenance),
            extra: Map::new(),
        }
    }
}

/// One image of a dataset manifest with its existing annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    #[serde(default)]
    pub annotations: Vec<AnnotationRecord>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// One bank entry: an exemplar patch with its binary mask, or a
/// pedestrian-free background crop when `mask` is absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub id: String,
    pub patch: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Reads a JSON Lines file; blank lines are skipped and errors name the
/// 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| Error::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads a manifest, resolving relative image paths.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ImageEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries: Vec<ImageEntry> = read_jsonl(path)?;
    for e in &mut entries {
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
    }
    Ok(entries)
}

pub fn save_annotations(records: &[AnnotationRecord], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(records, path)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    read_jsonl(path)
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<Vec<BankEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries: Vec<BankEntry> = read_jsonl(path)?;
    for e in &mut entries {
        for p in std::iter::once(&mut e.patch).chain(e.mask.as_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    Ok(entries)
}
