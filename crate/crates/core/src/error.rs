use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("empty sequence: {0}")]
    EmptySequence(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("input too short: {0}")]
    InputTooShort(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("I/O error at {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable numeric code, shared with the C ABI.
    pub fn code(&self) -> i32 {
        match self {
            Error::Dimension(_) => 2,
            Error::EmptySequence(_) => 3,
            Error::Index(_) => 4,
            Error::Contract(_) => 5,
            Error::NonFinite(_) => 6,
            Error::Format(_) => 7,
            Error::InputTooShort(_) => 8,
            Error::Input(_) => 9,
            Error::Validation(_) => 10,
            Error::Config(_) => 11,
            Error::Diverged(_) => 12,
            Error::Io { .. } => 13,
            Error::Json(_) => 14,
            Error::Image(_) => 15,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
