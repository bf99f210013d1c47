use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
///
/// Variants are grouped by the class of problem so callers (the CLI in
/// particular) can map them to distinct exit codes via [`Error::class`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("label error: {0}")]
    Label(String),

    #[error("instance error: {0}")]
    Instance(String),

    #[error("memory error: {0}")]
    Memory(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error classes, one per CLI exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Corpus,
    Checkpoint,
    Training,
    Io,
    Internal,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Usage(_) => ErrorClass::Config,
            Error::Corpus(_) | Error::Parse { .. } | Error::Label(_) | Error::Instance(_) => {
                ErrorClass::Corpus
            }
            Error::Checkpoint(_) | Error::Memory(_) => ErrorClass::Checkpoint,
            Error::Training(_) | Error::NonFinite { .. } => ErrorClass::Training,
            Error::Io { .. } => ErrorClass::Io,
            Error::Dimension(_) => ErrorClass::Internal,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
