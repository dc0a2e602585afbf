//! Error types shared across the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by validation, numerics, and I/O across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input violated a documented precondition (shape mismatch, bad label,
    /// empty input, out-of-range hyperparameter).
    #[error("validation: {0}")]
    Validation(String),

    /// A numerical routine failed (non-convergence, non-finite value).
    #[error("numerical: {0}")]
    Numerical(String),

    /// The requested model configuration is inconsistent.
    #[error("config: {0}")]
    Config(String),

    /// A file could not be read or written.
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file had the right shape but a cell could not be parsed.
    #[error("parse: {path}: row {row}, column {col}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        col: usize,
        message: String,
    },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
