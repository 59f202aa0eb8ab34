//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by tensor and graph operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: expected a scalar output, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: domain error: {reason}")]
    Domain { op: &'static str, reason: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
}

/// Errors from binary file formats (datasets, checkpoints).
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: bad magic at offset 0: expected {expected:?}")]
    BadMagic { path: String, expected: String },
    #[error("{path}: unsupported version {version}")]
    BadVersion { path: String, version: u32 },
    #[error("{path}: truncated file at offset {offset}")]
    Truncated { path: String, offset: u64 },
    #[error("{path}: checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum {
        path: String,
        stored: u32,
        computed: u32,
    },
    #[error("{path}: tensor '{name}': {reason}")]
    Tensor {
        path: String,
        name: String,
        reason: String,
    },
    #[error("{path}: shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        path: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{path}: metadata: {reason}")]
    Metadata { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Configuration and contract errors surfaced by models, trainers and estimators.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("geometry mismatch: {left}, {right}")]
    GeometryMismatch { left: String, right: String },
}

pub type TensorResult<T> = std::result::Result<T, TensorError>;
