//! Dense arrays, a define-then-run computation graph with reverse-mode
//! autodiff, and a finite-difference gradient checker.

mod array;
mod gradcheck;
mod graph;

pub use array::{Array, Scalar};
pub use gradcheck::{grad_check, GradReport};
pub use graph::{backward, forward, BackwardPlan, Bindings, Evaluator, Graph, NodeId};

use thiserror::Error;

/// Errors from array construction and graph evaluation.
#[derive(Debug, Clone, Error)]
pub enum NumericsError {
    #[error("shape {rows}x{cols} holds {expect} elements, got {got}")]
    ShapeDataMismatch { rows: usize, cols: usize, expect: usize, got: usize },
    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("non-finite values produced at {node}")]
    NonFinite { node: String },
    #[error("leaf '{0}' has no bound value")]
    Unbound(String),
    #[error("no input or parameter named '{0}'")]
    UnknownLeaf(String),
    #[error("no output named '{0}'")]
    UnknownOutput(String),
    #[error("no parameter named '{0}'")]
    UnknownParam(String),
    #[error("backward target '{0}' is not a 1x1 scalar")]
    NotScalar(String),
    #[error("finite-difference step {0:e} outside [1e-6, 1e-3]")]
    BadStep(f64),
    #[error("non-finite finite-difference estimate for parameter '{0}'")]
    BadEstimate(String),
}
