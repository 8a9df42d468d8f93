use std::path::PathBuf;

use thiserror::Error;

use crate::data::container::ContainerError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid ranks: {0}")]
    Ranks(String),

    #[error("index {index:?} out of range for dims {dims:?}")]
    IndexOutOfRange { index: Vec<usize>, dims: Vec<usize> },

    #[error("invalid convolution: {0}")]
    Conv(String),

    #[error("layer `{layer}`: {reason}")]
    Layer { layer: String, reason: String },

    #[error("backward called without a forward pass: {0}")]
    NoForward(String),

    #[error("unknown layer kind `{0}`")]
    UnknownLayerKind(String),

    #[error("architecture: {0}")]
    Arch(String),

    #[error("tensor yard: {0}")]
    Yard(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error(transparent)]
    Container(#[from] ContainerError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn layer(layer: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Layer {
            layer: layer.into(),
            reason: reason.into(),
        }
    }
}
