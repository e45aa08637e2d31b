use std::io;

use thiserror::Error;

/// Errors produced by every fallible operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("capacity exceeded: requested {requested} classes but only {available} verb-object pairs exist")]
    Capacity { requested: usize, available: usize },

    #[error("index {index} out of range for {what} of length {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("format error at line {line}: {reason}")]
    Format { line: usize, reason: String },

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Divergence {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error("config error at `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn arg(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}

pub(crate) fn format_err(line: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        line,
        reason: reason.into(),
    }
}
