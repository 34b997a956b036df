//! Toy-scale amortised path: a U-net predicts the warping field and blending
//! map in one pass and is trained against a real-vs-generated discriminator
//! and a pedestrian-vs-background classifier.

pub mod nets;
pub mod params;
pub mod tape;
pub mod train;

pub use nets::{predictor_forward, ClassifierParams, DiscriminatorParams, ParamSet, PredictorParams, UNetShape};
pub use train::{
    loss_adv, loss_hpm, predictor_objective, train, Banks, LossWeights, Sample, TrainConfig, TrainReport, Trained,
};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] stda_core::Error),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}; last good parameters kept")]
    Diverged {
        step: usize,
        checkpoint: Box<PredictorParams>,
    },
    #[error("malformed parameter file: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, Error>;
