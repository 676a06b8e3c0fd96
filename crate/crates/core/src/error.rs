use thiserror::Error;

/// Unified error type for the whole pipeline.
///
/// The CLI maps these onto exit codes: usage/invalid-argument errors -> 1,
/// data errors -> 2, everything else -> 3.
#[derive(Debug, Error)]
pub enum GgzError {
    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("malformed container at offset {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("corrupted payload: {0}")]
    Corruption(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("runtime failure: {0}")]
    Runtime(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GgzError>;
