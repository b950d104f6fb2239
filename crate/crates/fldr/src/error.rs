//! Error type of the std companion crate and its mapping to process exit codes.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum FldrError {
    #[error(transparent)]
    Core(#[from] fldr_core::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },

    #[error("{path}: invalid checkpoint: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("{path}: invalid config: {msg}")]
    ConfigFile { path: PathBuf, msg: String },

    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Usage(String),
}

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const NUMERIC: i32 = 3;
}

impl FldrError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FldrError::Io { path: path.into(), source }
    }

    pub(crate) fn data(msg: impl std::fmt::Display) -> Self {
        FldrError::Data(msg.to_string())
    }

    pub(crate) fn usage(msg: impl std::fmt::Display) -> Self {
        FldrError::Usage(msg.to_string())
    }

    /// Exit code for this failure: usage and configuration mistakes are 1,
    /// unreadable or inconsistent data is 2, non-finite numerics are 3.
    pub fn exit_code(&self) -> i32 {
        use fldr_core::Error as E;
        match self {
            FldrError::Core(E::NonFinite(_)) => exit::NUMERIC,
            FldrError::Core(E::Config(_) | E::InvalidArgument(_)) | FldrError::Usage(_) | FldrError::ConfigFile { .. } => exit::USAGE,
            FldrError::Core(_) | FldrError::Io { .. } | FldrError::Image { .. } | FldrError::Checkpoint { .. } | FldrError::Data(_) => {
                exit::DATA
            }
        }
    }
}

pub type Result<T, E = FldrError> = std::result::Result<T, E>;
