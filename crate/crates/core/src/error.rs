use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left:?} vs {right:?} ({context})")]
    Dimension {
        left: Vec<usize>,
        right: Vec<usize>,
        context: &'static str,
    },

    #[error("index {index} out of range for {len} classes")]
    Index { index: usize, len: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("gradient check error: {0}")]
    Check(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid annotation: {0}")]
    Invariant(String),

    #[error("unknown label `{label}` ({kind}) in line {line}")]
    UnknownLabel {
        label: String,
        kind: &'static str,
        line: usize,
    },

    #[error("no training data")]
    NoTrainingData,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("adapter error: {0}")]
    Adapter(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("validation error on `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(left: &[usize], right: &[usize], context: &'static str) -> Self {
        Error::Dimension {
            left: left.to_vec(),
            right: right.to_vec(),
            context,
        }
    }
}
