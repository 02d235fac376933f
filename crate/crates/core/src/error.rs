use std::path::PathBuf;

use diffcore::DiffError;
use thiserror::Error;

pub type Result<T, E = CloveError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CloveError {
    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CloveError {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        CloveError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CloveError::Io {
            context: context.into(),
            source,
        }
    }
}
