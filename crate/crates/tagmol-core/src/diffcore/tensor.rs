use serde::{Deserialize, Serialize};

use super::DiffError;

/// Dense row-major f64 tensor. Rank 0 (empty shape) is a scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn from_values(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, DiffError> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(DiffError::InvalidArg {
                op: "from_values",
                msg: format!("shape {:?} holds {} values, got {}", shape, numel, values.len()),
            });
        }
        Ok(Tensor { shape, values, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![0.0; numel], requires_grad: false }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![1.0; numel], requires_grad: false }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![v; numel], requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], values: vec![v], requires_grad: false }
    }

    /// Marks the tensor as a differentiation target when staged on a tape.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a rank-0 tensor.
    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
