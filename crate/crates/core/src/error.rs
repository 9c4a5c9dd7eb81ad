use std::io;

use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("timestep {t} outside schedule range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("missing weights: {0}")]
    MissingWeights(String),

    #[error("denoiser contract violated: {0}")]
    Contract(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("drag session aborted: {reason}")]
    Aborted {
        reason: String,
        report: Box<crate::drag::DragReport>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
