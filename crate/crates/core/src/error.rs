use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    Format { expected: u32, found: u32 },

    #[error("IDX data truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("label {label} out of range (must be < {classes})")]
    Domain { label: u32, classes: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    Pairing { images: usize, labels: usize },

    #[error("{0}")]
    Usage(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("worker thread panicked")]
    WorkerPanic,
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
