//! Dense-tensor reverse-mode autodiff on a Wengert tape.
//!
//! Backward passes emit their vector-Jacobian products as ordinary tape
//! operations, so a gradient is itself differentiable; that single
//! second-order path is what the critic's gradient penalty consumes.

mod check;
mod primitive;
mod tape;
mod tensor;

pub use check::{finite_diff_check, DEFAULT_FD_STEP};
pub use primitive::{apply_primitive, Primitive};
pub use tape::{Gradients, Tape, TensorId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("finite-difference oracle: non-finite value at coordinate {coord}")]
    NonFiniteProbe { coord: usize },
    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },
}
