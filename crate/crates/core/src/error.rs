use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("product of {0} factors is not supported (expected 2 or 3)")]
    UnsupportedProductOrder(usize),

    #[error("covariance matrix is not positive definite for `{kernel}` ({detail})")]
    NotPositiveDefinite { kernel: String, detail: String },

    #[error("unknown kernel token `{0}`")]
    UnknownToken(String),

    #[error("invalid caption: {0}")]
    InvalidCaption(String),

    #[error("vocabulary hash mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no candidate kernels")]
    NoCandidates,

    #[error("every initialisation failed for `{0}`")]
    FitFailed(String),

    #[error("training diverged at step {step} (lr {lr:e}): non-finite loss on batch {batch:?}")]
    NonFiniteLoss { step: usize, lr: f64, batch: Vec<usize> },

    #[error("shard {index}: {source}")]
    Shard {
        index: usize,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
