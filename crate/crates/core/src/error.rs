use std::io;

use thiserror::Error;

pub type Result<T, E = KcdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KcdError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("unsupported layout: {0}")]
    UnsupportedLayout(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("partition error: {0}")]
    Partition(String),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("empty class: {0}")]
    EmptyClass(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl KcdError {
    /// Stable machine-readable category name.
    pub fn category(&self) -> &'static str {
        match self {
            KcdError::Io(_) => "IoError",
            KcdError::Format(_) => "FormatError",
            KcdError::UnsupportedLayout(_) => "UnsupportedLayout",
            KcdError::InvalidValue(_) => "InvalidValue",
            KcdError::ShapeMismatch(_) => "ShapeMismatch",
            KcdError::InsufficientSamples(_) => "InsufficientSamples",
            KcdError::Partition(_) => "PartitionError",
            KcdError::SingularSystem(_) => "SingularSystem",
            KcdError::Divergence(_) => "DivergenceError",
            KcdError::EmptyClass(_) => "EmptyClass",
            KcdError::Config(_) => "ConfigError",
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            KcdError::Config(_) => 2,
            _ => 3,
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(KcdError::ShapeMismatch(msg.into()))
}
