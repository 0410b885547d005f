//! Dense tensors, reverse-mode differentiation, optimizers and losses.

pub mod checkpoint;
pub mod functional;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use optim::{lr_at, OptimizerConfig, OptimizerKind, OptimizerState, Schedule};
pub use params::{Bound, ParamId, ParamSet, Parameter};
pub use tape::{grad_evaluations, GradTag, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by `{op}` during {phase}")]
    NonFinite { op: &'static str, phase: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("optimizer step requested before any backward pass")]
    NoGradient,
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid probability {0}")]
    InvalidProbability(f64),
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
