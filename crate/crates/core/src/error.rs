use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("image geometry {found:?} does not match expected {expected:?}")]
    Geometry { expected: Vec<usize>, found: Vec<usize> },
    #[error("model is frozen; parameters cannot be updated")]
    Frozen,
    #[error("invalid placement: {0}")]
    Placement(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("{0} out of range")]
    OutOfRange(String),
    #[error("empty schedule")]
    EmptySchedule,
    #[error("unknown corruption family {0:?}")]
    UnknownFamily(String),
}
