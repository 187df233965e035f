//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up (matrix/vector dims, layer chaining, ...).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A value or configuration violates a precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Configuration file failed validation; lists every offending field.
    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    /// A cell in a data file could not be parsed.
    #[error("parse error at row {row}, column {col}: {message}")]
    Parse {
        row: usize,
        col: String,
        message: String,
    },

    /// A binary file does not match its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// Client response does not match the model that was sent.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Exit code contract: 0 ok, 1 config error, 2 I/O error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            _ => 1,
        }
    }
}
