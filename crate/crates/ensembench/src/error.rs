use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    #[error(transparent)]
    Core(#[from] ensembench_core::Error),

    #[error("{what} at byte {offset}: {detail}")]
    Format {
        what: &'static str,
        offset: u64,
        detail: String,
    },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("config is missing required keys: {}", .0.join(", "))]
    MissingKeys(Vec<&'static str>),

    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn format(what: &'static str, offset: u64, detail: impl Into<String>) -> Error {
        Error::Format {
            what,
            offset,
            detail: detail.into(),
        }
    }
}

impl From<ensembench_core::zoo::SpecViolation> for Error {
    fn from(e: ensembench_core::zoo::SpecViolation) -> Self {
        Error::Core(e.into())
    }
}
