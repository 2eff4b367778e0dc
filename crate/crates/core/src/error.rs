use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("unknown regime `{0}`")]
    MissingRegime(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code: 1 usage, 2 data, 3 numerical, 4 version,
    /// 5 schema, 6 missing regime.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::Numerical(_) | Error::Tensor(_) => 3,
            Error::Version { .. } => 4,
            Error::Schema(_) => 5,
            Error::MissingRegime(_) => 6,
        }
    }
}
