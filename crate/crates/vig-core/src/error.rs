//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VigError {
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("{what}: {value} is not divisible by {divisor}")]
    Divisibility {
        what: String,
        value: usize,
        divisor: usize,
    },

    #[error("empty frame sequence")]
    EmptySequence,

    #[error("masked loss has empty support: mask selects no compressed pixels")]
    EmptySupport,

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: file size mismatch: expected {expected} bytes, got {actual} bytes")]
    SizeMismatch {
        path: String,
        expected: u64,
        actual: u64,
    },

    #[error("non-finite gradient in {what} (step {step})")]
    NonFiniteGradient { what: String, step: u64 },

    #[error("{what} out of range: {detail}")]
    Range { what: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VigError>;

impl VigError {
    pub fn shape(what: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        VigError::ShapeMismatch {
            what: what.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn divisibility(what: impl Into<String>, value: usize, divisor: usize) -> Self {
        VigError::Divisibility {
            what: what.into(),
            value,
            divisor,
        }
    }
}
