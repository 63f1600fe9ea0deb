//! Dense-tensor engine with reverse-mode differentiation.
//!
//! Everything is 64-bit and row-major. A [`Graph`] records every executed
//! operation; [`Graph::backward`] replays the record in exact reverse order
//! and accumulates analytic gradients into each tensor that requested them.
//! The op set is the minimum the tracker needs, plus the three loss
//! primitives (Huber point loss, second-order trajectory smoothness,
//! status cross-entropy) and a finite-difference gradient checker.

mod checkpoint;
mod graph;
mod gradcheck;
mod optim;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::grad_check;
pub use graph::{Graph, Tensor, TensorRef};
pub use optim::{adam_step, Binding, OptimizerState, ParamSet, Parameter};

use thiserror::Error;

/// Errors raised by tensor operations, the optimizer, and checkpoint I/O.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("huber delta must be positive, got {0}")]
    NonPositiveDelta(f64),
    #[error("second-order difference needs at least 3 frames, got {0}")]
    TrajectoryTooShort(usize),
    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },
    #[error("tensor #{0} is not part of this graph")]
    DetachedTensor(usize),
    #[error("backward target must be a single-element tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter {0} has no gradient; run backward and collect first")]
    MissingGrad(String),
    #[error("checkpoint header mismatch, expected \"TGPT1\"")]
    BadCheckpointHeader,
    #[error("checkpoint truncated or corrupt: {0}")]
    BadCheckpoint(String),
}
