use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}:{line}: {message}", file.display())]
    Parse { file: PathBuf, line: u64, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("join failed: {0}")]
    Join(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("trajectory {subject_id} too short: duration {duration}s, need at least {required}s")]
    TooShort { subject_id: String, duration: f64, required: f64 },

    #[error("penalized IRLS did not converge after {iterations} iterations (deviance {deviance})")]
    Convergence { iterations: usize, deviance: f64 },

    #[error("weight search failed: {0}")]
    Search(String),

    #[error("insufficient class counts: {0}")]
    InsufficientClass(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Coarse classification used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Convergence { .. } | Error::Search(_) => ErrorKind::Convergence,
            Error::Io(_) => ErrorKind::Io,
            Error::Csv(e) if e.is_io_error() => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Convergence,
    Io,
}
