//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed input file (CSV/JSONL/TOML/checkpoint container).
    #[error("parse: {0}")]
    Parse(String),

    /// Input violates a documented invariant or precondition.
    #[error("validation: {0}")]
    Validation(String),

    /// Shape/dimension mismatch between related structures.
    #[error("dimension: {0}")]
    Dimension(String),

    /// Numerical breakdown (failed Cholesky, non-finite likelihood, ...).
    #[error("numerical: {0}")]
    Numerical(String),
}

impl Error {
    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
