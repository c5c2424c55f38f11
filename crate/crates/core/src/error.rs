use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FuseError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FuseError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: unsupported pixel format {format}")]
    UnsupportedFormat { path: PathBuf, format: String },

    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl FuseError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FuseError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        FuseError::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        FuseError::Shape(msg.into())
    }
}

/// Failure categories when reading a checkpoint container.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("parameter `{name}` has shape {found:?} in checkpoint, network expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("parameter `{name}` required by the network is missing from the checkpoint")]
    MissingParameter { name: String },

    #[error("checkpoint carries parameter `{name}` unknown to the network")]
    UnexpectedParameter { name: String },

    #[error("config hash mismatch: checkpoint {found}, current network {expected}")]
    HashMismatch { expected: String, found: String },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}
