use super::tape::{Tape, TensorId};
use super::tensor::Tensor;
use super::DiffError;

/// Uniform handle over the tape's primitive set, used to drive the
/// per-primitive gradient checks from one loop.
#[derive(Debug, Clone)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Matmul,
    Concat { axis: usize },
    Softmax { axis: usize },
    LeakyRelu { slope: f64 },
    Tanh,
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Max { axis: usize },
    Square,
    Sqrt,
    L2Norm,
    Reshape { shape: Vec<usize> },
    Transpose,
    /// Contiguous selection along an axis.
    Select { axis: usize, start: usize, len: usize },
    /// Elementwise product with a constant 0/1 mask.
    Mask { keep: Tensor },
}

impl Primitive {
    pub fn arity(&self) -> usize {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::Matmul => 2,
            Primitive::Concat { .. } => 2,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Matmul => "matmul",
            Primitive::Concat { .. } => "concat",
            Primitive::Softmax { .. } => "softmax",
            Primitive::LeakyRelu { .. } => "leaky_relu",
            Primitive::Tanh => "tanh",
            Primitive::Sum { .. } => "sum",
            Primitive::Mean { .. } => "mean",
            Primitive::Max { .. } => "max",
            Primitive::Square => "square",
            Primitive::Sqrt => "sqrt",
            Primitive::L2Norm => "l2_norm",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Transpose => "transpose",
            Primitive::Select { .. } => "select",
            Primitive::Mask { .. } => "mask",
        }
    }
}

/// Applies a primitive to staged inputs, recording it on the tape.
pub fn apply_primitive(
    tape: &mut Tape,
    prim: &Primitive,
    inputs: &[TensorId],
) -> Result<TensorId, DiffError> {
    if inputs.len() != prim.arity() {
        return Err(DiffError::InvalidArg {
            op: prim.name(),
            msg: format!("expected {} inputs, got {}", prim.arity(), inputs.len()),
        });
    }
    match prim {
        Primitive::Add => tape.add(inputs[0], inputs[1]),
        Primitive::Sub => tape.sub(inputs[0], inputs[1]),
        Primitive::Mul => tape.mul(inputs[0], inputs[1]),
        Primitive::Div => tape.div(inputs[0], inputs[1]),
        Primitive::Matmul => tape.matmul(inputs[0], inputs[1]),
        Primitive::Concat { axis } => tape.concat(*axis, inputs),
        Primitive::Softmax { axis } => tape.softmax(inputs[0], *axis),
        Primitive::LeakyRelu { slope } => tape.leaky_relu(inputs[0], *slope),
        Primitive::Tanh => tape.tanh(inputs[0]),
        Primitive::Sum { axis: Some(a) } => tape.sum_axis(inputs[0], *a),
        Primitive::Sum { axis: None } => tape.sum_all(inputs[0]),
        Primitive::Mean { axis: Some(a) } => tape.mean_axis(inputs[0], *a),
        Primitive::Mean { axis: None } => tape.mean_all(inputs[0]),
        Primitive::Max { axis } => tape.max_axis(inputs[0], *axis),
        Primitive::Square => tape.square(inputs[0]),
        Primitive::Sqrt => tape.sqrt(inputs[0]),
        Primitive::L2Norm => tape.l2_norm(inputs[0]),
        Primitive::Reshape { shape } => tape.reshape(inputs[0], shape.clone()),
        Primitive::Transpose => tape.transpose(inputs[0]),
        Primitive::Select { axis, start, len } => tape.slice(inputs[0], *axis, *start, *len),
        Primitive::Mask { keep } => tape.mask(inputs[0], keep),
    }
}
