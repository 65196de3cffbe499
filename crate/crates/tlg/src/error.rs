//! Crate-wide error type and result alias.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TlgError {
    /// Invalid or inconsistent configuration. Maps to exit code 2 in the CLI.
    #[error("config error: {0}")]
    Config(String),

    /// Input data failed validation (non-finite values, out-of-range masks, ...).
    #[error("data validation error: {0}")]
    DataValidation(String),

    /// Episode sampling could not be satisfied.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Tensor shape disagreement between pipeline stages.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Checkpoint serialization, deserialization, or hash mismatch.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    /// Anything that went wrong at run time and is not covered above.
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl TlgError {
    /// CLI exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            TlgError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, TlgError>;
