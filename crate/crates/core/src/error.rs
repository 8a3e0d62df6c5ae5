use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange { what: &'static str, index: usize, size: usize },
    #[error("non-finite gradient in parameter block `{block}` at offset {offset}")]
    NonFiniteGradient { block: String, offset: usize },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("{0}")]
    Enumeration(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    RunFailed(String),
    #[error("verification failed: {0}")]
    VerificationFailed(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
