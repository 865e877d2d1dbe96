//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: lhs {lhs:?} vs rhs {rhs:?} in {op}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("axis {axis} invalid for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("filter design failed: {0}")]
    FilterDesign(String),

    #[error("signal too short: {len} samples, mode needs at least {min}")]
    SignalTooShort { len: usize, min: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("dataset format error: {0}")]
    DataFormat(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: i64, classes: usize },

    #[error("model is in {actual} mode, operation requires {required} mode")]
    WrongMode {
        required: &'static str,
        actual: &'static str,
    },

    #[error("NaN gradient in parameter '{0}'")]
    NanGradient(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
