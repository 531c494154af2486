use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument or domain value (bad id, empty input, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Malformed file contents; the message names the offending field/record.
    #[error("format error: {0}")]
    Format(String),

    /// ODE integration produced a non-finite state.
    #[error("divergence at solver step {step}")]
    Divergence { step: usize },

    /// Numerical runtime failure (non-finite loss, too many diverged solves).
    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
