use std::path::PathBuf;

use krnet_core::KrnetError;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    /// I/O failures (unreadable input, unwritable output directory).
    pub const IO: i32 = 1;
    /// Bad flags, malformed or inconsistent configuration, unknown case.
    pub const USAGE: i32 = 2;
    /// Non-finite values, singular layers or diverged training.
    pub const NUMERICAL: i32 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Core(#[from] KrnetError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at epoch {epoch} (loss {loss:e}); history written to {}", dir.display())]
    Diverged { epoch: usize, loss: f64, dir: PathBuf },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Checkpoint(_) => exit::USAGE,
            CliError::Core(e) if e.is_numerical() => exit::NUMERICAL,
            CliError::Core(_) => exit::USAGE,
            CliError::Diverged { .. } => exit::NUMERICAL,
            CliError::Io { .. } => exit::IO,
        }
    }
}
