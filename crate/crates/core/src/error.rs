use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CrbmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CrbmError {
    /// The probability mass of a utility interval underflowed.
    #[error("degenerate interval mass {mass:e} (mean {mean}, std {std}, interval [{lower}, {upper}])")]
    DegenerateMass {
        mass: f64,
        mean: f64,
        std: f64,
        lower: f64,
        upper: f64,
    },

    #[error("ordinal level {level} outside 1..={levels}")]
    OutOfRangeLevel { level: usize, levels: usize },

    #[error("point {x} lies outside the interval [{lower}, {upper}]")]
    OutsideInterval { x: f64, lower: f64, upper: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("{path}:{line}: column `{column}` {message}")]
    SchemaMismatch {
        path: PathBuf,
        line: usize,
        column: String,
        message: String,
    },

    #[error("split by time requested but entry for instance `{instance}` has no timestamp")]
    MissingTimestamps { instance: String },

    #[error("nothing to evaluate")]
    EmptyEvaluation,

    #[error("non-finite parameter encountered: {0}")]
    NonFinite(String),

    #[error("model format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CrbmError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CrbmError::InvalidArgument(msg.into())
    }
}
