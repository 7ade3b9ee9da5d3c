use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {msg}", path.display())]
    Decode { path: PathBuf, msg: String },

    #[error("{}: unsupported image format", path.display())]
    UnsupportedFormat { path: PathBuf },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted at iteration {iteration}: {reason}")]
    Training { iteration: u64, reason: String },
}

impl Error {
    /// Stable, machine-parsable class name, used by the CLI error line.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::Index(_) => "index",
            Error::Invalid(_) => "invalid_argument",
            Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Decode { .. } => "decode",
            Error::UnsupportedFormat { .. } => "unsupported_format",
            Error::Dataset(_) => "dataset",
            Error::Checkpoint(_) => "checkpoint",
            Error::Training { .. } => "training",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
