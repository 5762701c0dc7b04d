use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A count, index or hyperparameter is outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Input data violates a precondition (zero-norm row, empty bag, ...).
    #[error("input error: {0}")]
    Input(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// Misuse of an API contract, such as differentiating a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's arguments rather than by the
    /// environment or the data on disk.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Parameter(_) | Error::Usage(_) | Error::Dimension(_)
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
