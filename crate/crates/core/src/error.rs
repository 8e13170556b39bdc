//! Error type shared by all core operations.

use alloc::string::String;

/// Errors raised by core operations.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    /// An operation received an image in the wrong color space.
    #[error("invalid color space: expected {expected}, got {got}")]
    InvalidColorSpace {
        expected: &'static str,
        got: &'static str,
    },
    /// Spatial or channel dimensions do not match what the operation needs.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A configuration value is out of its documented range.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A numeric precondition failed (non-finite input, NaN loss, ...).
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Correlation is undefined for a zero-variance input.
    #[error("undefined correlation: input {0} has zero variance")]
    ZeroVariance(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
