use std::io;

use thiserror::Error;

/// Failures while decoding one of the binary formats (STV1, STM0, STL1, STN1).
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dimension product overflows: {0:?}")]
    DimOverflow(Vec<u32>),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid value: {0}")]
    Value(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error: {0}")]
    Parse(#[from] ParseError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("training diverged at step {step} (loss = {loss})")]
    TrainingDiverged { step: usize, loss: f32 },
    #[error("degenerate concept activation vector: ‖w‖ = {norm:e}")]
    DegenerateCav { norm: f64 },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
