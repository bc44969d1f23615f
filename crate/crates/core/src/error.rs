//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// The variants map onto the process exit-code contract of the CLI:
/// configuration and usage problems, data/validation problems, and
/// numeric failures are kept distinguishable.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A file could not be parsed; carries the 1-based line number when known.
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Data failed a validation rule (bad keypoints, split leakage, geometry mismatch...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration value or combination is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A numeric failure (non-finite activations, NaN loss).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Binary container format violation (bad magic, truncated payload).
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CoreError::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CoreError::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
