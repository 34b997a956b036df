//! Predictor parameter files, in the same JSON-header + f32 container as
//! warping fields.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stda_core::io::{read_tensor_file, write_tensor_file};

use crate::nets::{ParamSet, PredictorParams, UNetShape};
use crate::{Error, Result};

const KIND: &str = "predictor";

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    unet: UNetShape,
    names: Vec<String>,
    shapes: Vec<[usize; 3]>,
}

pub fn save_predictor(params: &PredictorParams, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        kind: KIND.into(),
        unet: params.shape,
        names: params.weights.names.clone(),
        shapes: params.weights.shapes(),
    };
    Ok(write_tensor_file(path, &header, &params.weights.flatten())?)
}

/// Weights are stored as f32, so a loaded set matches the saved one to f32 precision.
pub fn load_predictor(path: impl AsRef<Path>) -> Result<PredictorParams> {
    let (header, flat) = read_tensor_file::<Header>(path, |h| h.shapes.iter().map(|s| s[0] * s[1] * s[2]).sum())?;
    if header.kind != KIND {
        return Err(Error::Malformed(format!(
            "expected predictor weights, found {}",
            header.kind
        )));
    }
    let weights = ParamSet::from_flat(header.names, &header.shapes, &flat)?;
    if !weights.is_finite() {
        return Err(Error::Malformed("non-finite weight".into()));
    }
    Ok(PredictorParams {
        shape: header.unet,
        weights,
    })
}
