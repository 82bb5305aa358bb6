use std::path::PathBuf;

use numkit::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatrError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("integrity error: {0}")]
    Integrity(String),
}

impl DatrError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            DatrError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = DatrError> = std::result::Result<T, E>;
