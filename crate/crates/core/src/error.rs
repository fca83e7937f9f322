use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the calibration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed NPY file: {0}")]
    Format(String),

    #[error("unsupported NPY layout: {0}")]
    UnsupportedLayout(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("empty evaluation region: {0}")]
    EmptyRegion(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes the message with a location (sample id, pixel, ...).
    pub fn context(self, what: &str) -> Self {
        match self {
            Error::Format(m) => Error::Format(format!("{what}: {m}")),
            Error::UnsupportedLayout(m) => Error::UnsupportedLayout(format!("{what}: {m}")),
            Error::Validation(m) => Error::Validation(format!("{what}: {m}")),
            Error::Domain(m) => Error::Domain(format!("{what}: {m}")),
            Error::Numerical(m) => Error::Numerical(format!("{what}: {m}")),
            Error::State(m) => Error::State(format!("{what}: {m}")),
            Error::EmptyRegion(m) => Error::EmptyRegion(format!("{what}: {m}")),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
