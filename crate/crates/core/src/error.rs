use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or truncated binary / text input.
    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported audio: {0}")]
    Audio(String),

    /// A configuration value violates one of its invariants.
    #[error("invalid config: {0}")]
    Config(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("frozen encoder was modified")]
    FrozenViolation,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
