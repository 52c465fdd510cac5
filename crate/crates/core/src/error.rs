//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VawiError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl VawiError {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        VawiError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VawiError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input or configuration rather than a
    /// failure during computation.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            VawiError::Config(_) | VawiError::Parse { .. } | VawiError::Contract(_) | VawiError::Length { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, VawiError>;
