use std::path::PathBuf;

use sdfa_autograd::TapeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SdfaError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("insufficient domain statistics: {0}")]
    InsufficientStats(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("dataset error: {0}")]
    Data(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, SdfaError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> SdfaError {
    let path = path.into();
    move |source| SdfaError::Io { path, source }
}
