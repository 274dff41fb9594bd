//! Shared error type for the whole pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero-norm row {row}")]
    ZeroNormRow { row: usize },

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("sinkhorn kernel underflow: {0}; use a larger lambda or the log-stabilized solver")]
    KernelUnderflow(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("instance too large for the exact oracle: {0}")]
    OracleTooLarge(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("index {index} out of range ({len} available): {what}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("unsupported file version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("transport plans unavailable: {0}")]
    MissingPlans(String),

    #[error("class {class}: {source}")]
    InClass {
        class: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("batch {batch}: {source}")]
    InBatch {
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Tag an error with the class index it occurred in.
    pub fn in_class(self, class: usize) -> Self {
        Error::InClass {
            class,
            source: Box::new(self),
        }
    }

    /// Tag an error with the batch index it occurred in.
    pub fn in_batch(self, batch: usize) -> Self {
        Error::InBatch {
            batch,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
