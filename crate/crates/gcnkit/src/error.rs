//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by tensor ops, builders, parsers, and the training loop.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor operation received incompatible shapes. The message names
    /// the offending dimension.
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// An argument was out of range or otherwise invalid.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// An architecture file failed to parse; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Non-finite values or other numerical failures at runtime.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A model or data file had an invalid format.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
