use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("sample value {value} out of range [0, {max}] at index {index} in {path}")]
    Range {
        path: PathBuf,
        value: u32,
        max: u32,
        index: usize,
    },

    #[error("truncated payload in {path}: expected {expected} samples, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint key mismatch: missing {missing:?}, unexpected {unexpected:?}")]
    CheckpointKeys {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },

    #[error("no counterpart for {id} in {dir}")]
    Pairing { id: String, dir: PathBuf },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Png(#[from] ::image::ImageError),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
