//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("unsupported geometry: {0}")]
    Geometry(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("task {0} already registered")]
    TaskAlreadyRegistered(usize),

    #[error("task {0} not registered")]
    UnknownTask(usize),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("label {label} outside the {seen} seen classes")]
    LabelOutOfRange { label: usize, seen: usize },

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("empty task data: {0}")]
    EmptyData(String),

    #[error("metric undefined: {0}")]
    Metric(String),
}

pub type Result<T> = std::result::Result<T, Error>;
