use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("invalid dimensions {height}x{width}: both must be positive")]
    EmptyDimensions { height: usize, width: usize },

    #[error("value {value} at index {index} is outside [{lo}, {hi}]")]
    OutOfRange { index: usize, value: f64, lo: f64, hi: f64 },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("span {index} does not fit inside a row of width {width}")]
    SpanOutOfBounds { index: usize, width: usize },

    #[error("box {rect:?} does not fit inside a {height}x{width} image")]
    BoxOutOfBounds {
        rect: (i64, i64, i64, i64),
        height: usize,
        width: usize,
    },

    #[error("placement model cannot be fitted: {0}")]
    DegenerateFit(String),

    #[error("placement infeasible: {0}")]
    InfeasiblePlacement(String),

    #[error("solver loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid silhouette: {0}")]
    InvalidSilhouette(String),

    #[error("malformed field file: {0}")]
    MalformedFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_same_dims(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}
