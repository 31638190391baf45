//! Reverse-mode automatic differentiation over a define-by-run tape.

mod checkpoint;
pub mod gradcheck;
mod nn;
mod params;
mod tape;

pub use checkpoint::{Checkpoint, CheckpointError, ParamRecord, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use nn::{Linear, Mlp};
pub use params::{Binding, Param, ParamId, ParamStore, SgdConfig};
pub use tape::{sigmoid, smooth_l1, smooth_l1_grad, softmax_row, NodeId, Op, Tape, TensorNode, SIGMOID_EPS};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("gradient reversal coefficient must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batch size mismatch: expected {expected}, got {got}")]
    BatchMismatch { expected: usize, got: usize },
    #[error("discriminator batch needs both domains (source {n_src}, target {n_tgt})")]
    BatchComposition { n_src: usize, n_tgt: usize },
    #[error("weights must be non-negative, got {0}")]
    NegativeWeight(f64),
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("parameter {name}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("expected {expected} parameters, got {got}")]
    MissingParameters { expected: usize, got: usize },
}
