use std::path::Path;

use asc_core::AscError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("oracle failure: {0}")]
    Oracle(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.display().to_string(), message: err.to_string() }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Oracle(_) => 4,
            CliError::Internal(_) => 5,
        }
    }
}

impl From<AscError> for CliError {
    fn from(e: AscError) -> Self {
        if e.is_oracle_failure() || matches!(e, AscError::Decode(_)) {
            CliError::Oracle(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}
