use std::io;

use isoprobe_core::Error as CoreError;

/// Command failures, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at {field}: {message}")]
    Config { field: String, message: String },
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("stale artifact: {0}")]
    StaleArtifact(String),
    #[error("merge refused: {0}")]
    MergeRefused(String),
    #[error("checks failed: {}", .0.join(", "))]
    CheckFailed(Vec<String>),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("invalid input file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config { field: field.into(), message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::MergeRefused(_) => 2,
            CliError::MissingInput(_) | CliError::StaleArtifact(_) | CliError::Format(_) => 3,
            CliError::CheckFailed(_) => 4,
            CliError::Numeric(_) => 5,
            CliError::Io(e) if e.kind() == io::ErrorKind::NotFound => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidArgument(m) => CliError::config("arguments", m),
            CoreError::Format(m) => CliError::Format(m),
            CoreError::Io(io) => CliError::Io(io),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
