use alloc::string::{String, ToString};
use core::fmt::Display;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension {dim} is not a multiple of block size {block}")]
    NotDivisible { dim: usize, block: usize },

    #[error("image {height}x{width} is too small for the scale pyramid (minimum side {min})")]
    TooSmall { height: usize, width: usize, min: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Display) -> Self {
        Error::Shape(msg.to_string())
    }

    pub(crate) fn config(msg: impl Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub(crate) fn arg(msg: impl Display) -> Self {
        Error::InvalidArgument(msg.to_string())
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
