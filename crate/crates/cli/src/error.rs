use std::path::Path;

use thiserror::Error;

/// Failures of a CLI command, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid key, value or combination of settings.
    #[error("config error for `{key}`: {detail}")]
    Config { key: String, detail: String },

    /// Every run of the command diverged.
    #[error("all runs diverged: {0}")]
    Diverged(String),

    #[error("i/o error on {path}: {detail}")]
    Io { path: String, detail: String },

    /// A library error that is neither a config nor an i/o problem.
    #[error(transparent)]
    Core(prior_attn_core::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            detail: err.to_string(),
        }
    }

    /// 0 success, 1 config error, 2 divergence in all seeds, 3 i/o error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 1,
            CliError::Diverged(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(_) => 1,
        }
    }
}

impl From<prior_attn_core::Error> for CliError {
    fn from(e: prior_attn_core::Error) -> Self {
        match e {
            prior_attn_core::Error::Config { key, detail } => CliError::Config { key, detail },
            other => CliError::Core(other),
        }
    }
}
