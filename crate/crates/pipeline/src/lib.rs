//! Dataset-level augmentation: for every image draw a number of instances,
//! place each on the ground-plane law, deform a bank exemplar towards another
//! exemplar's shape, blend it into the local background and record it.

pub mod augment;
pub mod corpus;
pub mod dataset;
pub mod eval;

use std::path::{Path, PathBuf};

pub use augment::{augment_dataset, augment_image, AugmentConfig, AugmentReport, Context, DeformMode, Exemplar};
pub use dataset::{load_annotations, load_manifest, save_annotations, AnnotationRecord, ImageEntry, Provenance};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] stda_core::Error),
    #[error(transparent)]
    Adversarial(#[from] stda_adversarial::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Malformed {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bank exhausted: {0}")]
    BankExhausted(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
