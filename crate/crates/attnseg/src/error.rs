use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants are grouped by the process exit code the
/// CLI maps them to: configuration and input problems exit with 2, numeric
/// failures during training exit with 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json error at {path}: {message}")]
    Json { path: PathBuf, message: String },

    #[error("checkpoint error at {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Json { path: path.into(), message: err.to_string() }
    }

    pub fn image(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Image { path: path.into(), message: err.to_string() }
    }

    pub fn checkpoint(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Checkpoint { path: path.into(), message: err.to_string() }
    }

    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
