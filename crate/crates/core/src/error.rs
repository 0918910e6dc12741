use thiserror::Error;

use crate::game::Policy;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid response space: {0}")]
    InvalidSpace(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid preference matrix at cell ({row}, {col}): {reason}")]
    InvalidMatrix {
        row: usize,
        col: usize,
        reason: String,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("policy places mass on response {0} outside the reference support")]
    SupportMismatch(usize),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("solver did not converge after {iterations} iterations (best gap {gap:.3e})")]
    NotConverged {
        iterations: usize,
        gap: f64,
        best: Box<Policy>,
    },

    #[error("singular normal system: {0}")]
    SingularSystem(String),

    #[error("cannot collect preference pairs: {0}")]
    Collection(String),

    #[error("config error at {location}: {reason}")]
    Config { location: String, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
