use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("construction error: {0}")]
    Construction(String),
    #[error("stores are not congruent: {0}")]
    Congruence(String),
    #[error("snapshot format error: {0}")]
    Format(String),
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("mask error: {0}")]
    Mask(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("training diverged at step {step}: non-finite loss")]
    Divergence { step: u64 },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
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
