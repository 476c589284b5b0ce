use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),

    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Core(#[from] ewod_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 1 for numerical failures, 2 for bad input.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::GradCheck(_) => 1,
            CliError::Core(e) if e.is_numerical() => 1,
            _ => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
