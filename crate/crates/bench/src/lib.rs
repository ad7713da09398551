//! Config-driven experiment pipeline behind the `tsadv` binary.

pub mod config;
pub mod gradcheck;
pub mod pipeline;

use std::path::PathBuf;

pub use config::ExperimentConfig;
pub use pipeline::{Pipeline, Progress};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("{failed} of {total} cells failed")]
    Partial { failed: usize, total: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] tsadv_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 0 success, 1 config error, 2 partial failure, 3 I/O error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Partial { .. } => 2,
            CliError::Io { .. } => 3,
            CliError::Core(tsadv_core::Error::Io { .. } | tsadv_core::Error::Csv(_)) => 3,
            CliError::Core(_) => 1,
        }
    }
}
