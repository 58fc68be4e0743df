use std::path::Path;

use thiserror::Error;

/// Failure of a CLI command. The variant fixes the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Schema(String),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) | CliError::Schema(_) => 1,
            CliError::Domain(_) => 2,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }

    pub fn schema(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Schema(format!("{}: {err}", path.display()))
    }

    pub fn domain(err: impl std::fmt::Display) -> Self {
        CliError::Domain(err.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
