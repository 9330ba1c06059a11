//! Error type shared across the core crate.

use thiserror::Error;

/// Errors produced by the motion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Skeleton topology is malformed (cycle, forward reference, multiple roots).
    #[error("topology error: {0}")]
    Topology(String),

    /// Configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// BVH (or other text format) failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A 6D rotation input cannot be orthonormalized.
    #[error("degenerate rotation: {0}")]
    DegenerateRotation(String),

    /// Input failed a validation precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// Tensor/array shapes do not match the operation contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Normalization statistics are degenerate or unusable.
    #[error("stats error: {0}")]
    Stats(String),

    /// Foot-contact labeling cannot run (e.g. no toe joints configured).
    #[error("labeling error: {0}")]
    Labeling(String),

    /// Motion export failed (non-finite values, empty clip).
    #[error("export error: {0}")]
    Export(String),

    /// Checkpoint container is malformed or has an unsupported version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training diverged or produced non-finite values.
    #[error("training error: {0}")]
    Training(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
