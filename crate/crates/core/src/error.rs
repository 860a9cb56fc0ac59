use std::path::PathBuf;

use crate::metrics::Region;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("spatial size {height}x{width} is not divisible by {divisor}")]
    IndivisibleSize {
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("could not generate a non-degenerate shadow shape after {attempts} attempts")]
    DegenerateShape { attempts: usize },

    #[error("region {0} is empty")]
    EmptyRegion(Region),

    #[error("non-finite value at step {step} (norm {norm})")]
    NonFinite { step: usize, norm: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
