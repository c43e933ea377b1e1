use pmt_tensor::{FormatError, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("format error: {0}")]
    Format(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<FormatError> for Error {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Io(io) => Error::Io(io),
            FormatError::Extents { .. } | FormatError::Missing(_) | FormatError::DType { .. } => {
                Error::Checkpoint(e.to_string())
            }
            other => Error::Format(other.to_string()),
        }
    }
}

impl Error {
    /// Process exit code: 1 usage/config, 2 numeric, 3 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::Tensor(TensorError::NonFinite { .. }) => 2,
            Error::Io(_) | Error::Format(_) | Error::Checkpoint(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
