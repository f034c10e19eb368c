//! Dense matrices and a reverse-mode tape over them.
//!
//! Every model component records its forward pass on a [`Tape`]; a single
//! [`Tape::backward`] call from the scalar training loss yields gradients for
//! all parameter leaves.

mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{BinaryOp, Gradients, Tape, UnaryOp, Var};

/// Negative slope of the leaky rectifier applied to attention logits.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch {}x{} vs {}x{}", left.0, left.1, right.0, right.1)]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward requires a 1x1 loss, got {}x{}", shape.0, shape.1)]
    NonScalarLoss { shape: (usize, usize) },
    #[error("{0}")]
    Contract(String),
}
