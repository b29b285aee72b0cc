//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid span: {0}")]
    InvalidSpan(String),

    #[error("attention over an empty allowed set")]
    EmptyContext,

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("invalid gallery: {0}")]
    InvalidGallery(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("inconsistent index: {0}")]
    InconsistentIndex(String),

    #[error("non-finite value in tensor {tensor}")]
    Numeric { tensor: String },

    #[error("checkpoint incompatible: {0}")]
    CheckpointIncompatible(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code mapping for the CLI: numeric failures are distinguished
    /// from validation and IO problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } => 2,
            _ => 1,
        }
    }
}
