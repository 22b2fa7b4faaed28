use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced anywhere in the calibration toolkit.
///
/// The variants are grouped so that front ends can map them onto coarse
/// failure classes (see [`Error::class`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid record `{id}`: {reason}")]
    InvalidRecord { id: String, reason: String },

    #[error("line {line}: field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("fit failed in stage `{stage}`: {message}")]
    Fit { stage: &'static str, message: String },

    #[error("record `{id}` from the test split reached fitting stage `{stage}`")]
    Leakage { id: String, stage: &'static str },

    #[error("bisection did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("artifact format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Convergence,
    Transport,
}

impl Error {
    pub fn invalid_record(id: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidRecord {
            id: id.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Version { .. } => ErrorClass::Usage,
            Error::Convergence { .. } | Error::NonFiniteLoss { .. } => ErrorClass::Convergence,
            Error::Transport(_) => ErrorClass::Transport,
            Error::InvalidRecord { .. }
            | Error::Schema { .. }
            | Error::Fit { .. }
            | Error::Leakage { .. }
            | Error::Io { .. }
            | Error::Json { .. } => ErrorClass::Data,
        }
    }
}
