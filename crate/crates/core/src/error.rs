use std::path::PathBuf;

use thiserror::Error;

use crate::tensorgrad::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{}: unsupported image ({detected})", path.display())]
    ImageFormat { path: PathBuf, detected: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("patch placed on box {bbox} falls entirely outside the image")]
    PatchOffImage { bbox: String },

    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("cosine similarity undefined: norm {0:e} is below 1e-8")]
    ZeroNorm(f64),

    #[error("detection loss over an empty batch")]
    EmptyBatch,

    #[error("detector reached {best_map:.2}% validation mAP, below the required {required:.2}%")]
    TrainingFailed {
        best_map: f64,
        required: f64,
        curve: crate::detector::TrainingCurve,
    },

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
