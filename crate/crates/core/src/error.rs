use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("position {pos} is outside grid {grid}")]
    OutOfRange { pos: String, grid: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Shape {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }
}
