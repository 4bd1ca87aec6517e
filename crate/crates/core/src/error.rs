use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Zero vector, zero prefix, or an all-zero token row.
    #[error("degenerate {0}")]
    Degenerate(&'static str),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed store: {0}")]
    Format(String),

    #[error("unknown task `{name}` (valid tasks: {valid})")]
    UnknownTask { name: String, valid: String },

    #[error("training diverged at step {step}: term `{term}` is {value}")]
    Diverged {
        step: usize,
        term: String,
        value: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// NaN/divergence class failures, as opposed to bad data.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Diverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
