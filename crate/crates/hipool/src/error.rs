//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor or matrix shapes. Always names both shapes.
    #[error("dimension mismatch in {context}: {left:?} vs {right:?}")]
    Dimension {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Input outside an operation's domain (bad index, empty data, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration value(s).
    #[error("configuration error: {0}")]
    Config(String),

    /// Unparseable input file content.
    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    /// Parseable input that violates a structural constraint.
    #[error("schema error: {0}")]
    Schema(String),

    /// Non-finite value where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
