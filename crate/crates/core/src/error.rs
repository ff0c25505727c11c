use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimensions of two operands do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A caller supplied an argument outside the operation's contract.
    #[error("invalid usage: {0}")]
    Usage(String),

    /// Input is well-formed but numerically degenerate (zero variance, zero norm, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Feature window would reach past either end of the stream.
    #[error("symbol {index} is within {half_width} symbols of the stream boundary (n_seq = {len})")]
    Boundary {
        index: usize,
        half_width: usize,
        len: usize,
    },

    /// A file on disk does not match its declared format.
    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}
