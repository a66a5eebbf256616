use std::io::ErrorKind;

use nluadv_annotate::ApiError;
use nluadv_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Service(#[from] ApiError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

fn io_code(e: &std::io::Error) -> i32 {
    match e.kind() {
        ErrorKind::NotFound | ErrorKind::InvalidData | ErrorKind::UnexpectedEof => EXIT_DATA,
        _ => EXIT_RUNTIME,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) | CliError::Json(_) => EXIT_DATA,
            CliError::Io(e) => io_code(e),
            CliError::Core(e) => match e {
                CoreError::Parse { .. }
                | CoreError::Invariant(_)
                | CoreError::UnknownLabel { .. }
                | CoreError::NoTrainingData
                | CoreError::Validation { .. }
                | CoreError::NotFound(_)
                | CoreError::Checkpoint(_)
                | CoreError::Json(_) => EXIT_DATA,
                CoreError::Io(e) => io_code(e),
                _ => EXIT_RUNTIME,
            },
            CliError::Service(ApiError::TokenFile { .. }) => EXIT_DATA,
            CliError::Service(_) => EXIT_RUNTIME,
        }
    }
}
