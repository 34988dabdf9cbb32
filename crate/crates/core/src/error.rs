use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the spinlets pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("replicate `{replicate}` has inconsistent {field} across its rows")]
    Inconsistent { replicate: String, field: &'static str },

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("match `{0}` has no score metadata")]
    MissingScore(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in the linear predictor at cell ({i}, {j})")]
    NonFinite { i: usize, j: usize },

    #[error("log density is undefined for alpha = {alpha}, eta = {eta}")]
    UnsupportedDensity { alpha: f64, eta: f64 },

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("optimization failed after {iterations} EM iterations: {message}")]
    Optimization {
        iterations: usize,
        message: String,
        trace: Vec<(f64, f64)>,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}
