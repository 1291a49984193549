use super::tensor::{strides_of, Tensor};
use super::DiffError;

/// Index of a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(pub(crate) usize);

/// How a tape node was produced. Inputs always precede the node itself,
/// so the node vector is a topological order of the computation.
/// Scalar payloads that backward does not read are kept for the record.
#[derive(Debug, Clone)]
#[allow(dead_code)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Matmul(TensorId, TensorId),
    /// Elementwise product with a rank-0 tape node.
    ScaleBy(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId, f64),
    Permute(TensorId, Vec<usize>),
    Reshape(TensorId),
    Concat(Vec<TensorId>, usize),
    Slice { input: TensorId, axis: usize, start: usize, len: usize },
    Expand { input: TensorId, axis: usize, reps: usize },
    Softmax { input: TensorId, axis: usize },
    LeakyRelu { input: TensorId, slope: f64 },
    Tanh(TensorId),
    Square(TensorId),
    Sqrt(TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    SumAxis { input: TensorId, axis: usize },
    MeanAxis { input: TensorId, axis: usize },
    MaxAxis { input: TensorId, axis: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient map produced by [`Tape::backward`]: node id -> gradient node id.
///
/// Gradients live on the same tape, so a gradient can itself be fed into
/// further tape operations and differentiated again (the WGAN-GP penalty
/// needs exactly one such second-order pass).
pub struct Gradients {
    grads: Vec<Option<TensorId>>,
}

impl Gradients {
    pub fn id(&self, t: TensorId) -> Option<TensorId> {
        self.grads.get(t.0).copied().flatten()
    }
}

/// Wengert tape: records primitive applications during the forward pass and
/// replays them in reverse for gradients. One tape per differentiated
/// computation; tapes are independent and never share state.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Stages a tensor; it becomes a gradient target iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// Stages a tensor that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> TensorId {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        self.constant(Tensor::scalar(v))
    }

    pub fn zeros_const(&mut self, shape: Vec<usize>) -> TensorId {
        self.constant(Tensor::zeros(shape))
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value.values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> TensorId {
        value.requires_grad = needs_grad;
        self.nodes.push(Node { value, op, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(DiffError::ShapeMismatch {
                op: op_name,
                shapes: vec![ta.shape.clone(), tb.shape.clone()],
            });
        }
        let values = ta.values.iter().zip(&tb.values).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor { shape: ta.shape.clone(), values, requires_grad: false };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        self.binary_elementwise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise multiply by a rank-0 tape node (the one permitted
    /// scalar-tensor broadcast).
    pub fn scale_by(&mut self, a: TensorId, s: TensorId) -> Result<TensorId, DiffError> {
        let ts = &self.nodes[s.0].value;
        if !ts.is_scalar() {
            return Err(DiffError::ShapeMismatch {
                op: "scale_by",
                shapes: vec![self.nodes[a.0].value.shape.clone(), ts.shape.clone()],
            });
        }
        let sv = ts.scalar_value();
        let ta = &self.nodes[a.0].value;
        let out = Tensor {
            shape: ta.shape.clone(),
            values: ta.values.iter().map(|&x| x * sv).collect(),
            requires_grad: false,
        };
        let needs = self.needs(a) || self.needs(s);
        Ok(self.push(out, Op::ScaleBy(a, s), needs))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId, DiffError> {
        let ta = &self.nodes[a.0].value;
        let out = Tensor {
            shape: ta.shape.clone(),
            values: ta.values.iter().map(|&x| x * c).collect(),
            requires_grad: false,
        };
        let needs = self.needs(a);
        Ok(self.push(out, Op::Scale(a, c), needs))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId, DiffError> {
        let ta = &self.nodes[a.0].value;
        let out = Tensor {
            shape: ta.shape.clone(),
            values: ta.values.iter().map(|&x| x + c).collect(),
            requires_grad: false,
        };
        let needs = self.needs(a);
        Ok(self.push(out, Op::AddScalar(a, c), needs))
    }

    pub fn neg(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                shapes: vec![ta.shape.clone(), tb.shape.clone()],
            });
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ta.values[i * k..(i + 1) * k];
            let crow = &mut values[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.values[p * n..(p + 1) * n];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c += av * bv;
                }
            }
        }
        let out = Tensor { shape: vec![m, n], values, requires_grad: false };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul(a, b), needs))
    }

    /// Axis permutation; `transpose` is the rank-2 special case.
    pub fn permute(&mut self, a: TensorId, perm: &[usize]) -> Result<TensorId, DiffError> {
        let ta = &self.nodes[a.0].value;
        let rank = ta.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(DiffError::InvalidArg {
                op: "permute",
                msg: format!("{:?} is not a permutation of rank {}", perm, rank),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| ta.shape[p]).collect();
        let in_strides = ta.strides();
        let out_strides = strides_of(&out_shape);
        let mut values = vec![0.0; ta.numel()];
        // out[c0,..] = in[c_{perm[0]},..]: walk the output linearly.
        let mut coords = vec![0usize; rank];
        for out_idx in 0..values.len() {
            let mut in_idx = 0;
            for d in 0..rank {
                in_idx += coords[d] * in_strides[perm[d]];
            }
            values[out_idx] = ta.values[in_idx];
            for d in (0..rank).rev() {
                coords[d] += 1;
                if coords[d] < out_shape[d] {
                    break;
                }
                coords[d] = 0;
            }
        }
        let _ = out_strides;
        let out = Tensor { shape: out_shape, values, requires_grad: false };
        let needs = self.needs(a);
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), needs))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        self.permute(a, &[1, 0])
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, DiffError> {
        let ta = &self.nodes[a.0].value;
        let numel: usize = shape.iter().product();
        if numel != ta.numel() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                shapes: vec![ta.shape.clone(), shape],
            });
        }
        let out = Tensor { shape, values: ta.values.clone(), requires_grad: false };
        let needs = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), needs))
    }

    pub fn concat(&mut self, axis: usize, parts: &[TensorId]) -> Result<TensorId, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::InvalidArg { op: "concat", msg: "no inputs".into() });
        }
        let first = &self.nodes[parts[0].0].value.shape;
        if axis >= first.len() {
            return Err(DiffError::InvalidArg {
                op: "concat",
                msg: format!("axis {} out of range for rank {}", axis, first.len()),
            });
        }
        let mut out_shape = first.clone();
        let mut axis_total = 0;
        for &p in parts {
            let s = &self.nodes[p.0].value.shape;
            let compatible = s.len() == first.len()
                && s.iter().zip(first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    shapes: parts.iter().map(|&q| self.nodes[q.0].value.shape.clone()).collect(),
                });
            }
            axis_total += s[axis];
        }
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut values = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let block = t.shape[axis] * inner;
                values.extend_from_slice(&t.values[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor { shape: out_shape, values, requires_grad: false };
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), needs))
    }

    pub fn slice(
        &mut self,
        a: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorId, DiffError> {
        let ta = &self.nodes[a.0].value;
        if axis >= ta.shape.len() || start + len > ta.shape[axis] {
            return Err(DiffError::InvalidArg {
                op: "slice",
                msg: format!("[{}, {}) on axis {} of shape {:?}", start, start + len, axis, ta.shape),
            });
        }
        let outer: usize = ta.shape[..axis].iter().product();
        let inner: usize = ta.shape[axis + 1..].iter().product();
        let dim = ta.shape[axis];
        let mut values = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            values.extend_from_slice(&ta.values[base..base + len * inner]);
        }
        let mut out_shape = ta.shape.clone();
        out_shape[axis] = len;
        let out = Tensor { shape: out_shape, values, requires_grad: false };
        let needs = self.needs(a);
        Ok(self.push(out, Op::Slice { input: a, axis, start, len }, needs))
    }

    /// Repeats a size-1 axis `reps` times.
    pub fn expand(&mut self, a: TensorId, axis: usize, reps: usize) -> Result<TensorId, DiffError> {
        let ta = &self.nodes[a.0].value;
        if axis >= ta.shape.len() || ta.shape[axis] != 1 {
            return Err(DiffError::InvalidArg {
                op: "expand",
                msg: format!("axis {} of shape {:?} must have size 1", axis, ta.shape),
            });
        }
        let outer: usize = ta.shape[..axis].iter().product();
        let inner: usize = ta.shape[axis + 1..].iter().product();
        let mut values = Vec::with_capacity(outer * reps * inner);
        for o in 0..outer {
            let block = &ta.values[o * inner..(o + 1) * inner];
            for _ in 0..reps {
                values.extend_from_slice(block);
            }
        }
        let mut out_shape = ta.shape.clone();
        out_shape[axis] = reps;
        let out = Tensor { shape: out_shape, values, requires_grad: false };
        let needs = self.needs(a);
        Ok(self.push(out, Op::Expand { input: a, axis, reps }, needs))
    }

    fn axis_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner = shape[axis + 1..].iter().product();
        (outer, dim, inner)
    }

    fn check_axis(&self, op: &'static str, a: TensorId, axis: usize) -> Result<(), DiffError> {
        let rank = self.nodes[a.0].value.shape.len();
        if axis >= rank {
            return Err(DiffError::InvalidArg {
                op,
                msg: format!("axis {} out of range for rank {}", axis, rank),
            });
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId, DiffError> {
        self.check_axis("softmax", a, axis)?;
        let ta = &self.nodes[a.0].value;
        let (outer, dim, inner) = Self::axis_geometry(&ta.shape, axis);
        let mut values = ta.values.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                let mut m = f64::NEG_INFINITY;
                for d in 0..dim {
                    m = m.max(values[base + d * inner]);
                }
                let mut z = 0.0;
                for d in 0..dim {
                    let e = (values[base + d * inner] - m).exp();
                    values[base + d * inner] = e;
                    z += e;
                }
                for d in 0..dim {
                    values[base + d * inner] /= z;
                }
            }
        }
        let out = Tensor { shape: ta.shape.clone(), values, requires_grad: false };
        let needs = self.needs(a);
        Ok(self.push(out, Op::Softmax { input: a, axis }, needs))
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> Result<TensorId, DiffError> {
        let ta = &self.nodes[a.0].value;
        let values = ta.values.iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect();
        let out = Tensor { shape: ta.shape.clone(), values, requires_grad: false };
        let needs = self.needs(a);
        Ok(self.push(out, Op::LeakyRelu { input: a, slope }, needs))
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let ta = &self.nodes[a.0].value;
        let values = ta.values.iter().map(|&x| x.tanh()).collect();
        let out = Tensor { shape: ta.shape.clone(), values, requires_grad: false };
        let needs = self.needs(a);
        Ok(self.push(out, Op::Tanh(a), needs))
    }

    /// sigmoid(x) = (tanh(x/2) + 1) / 2, built from recorded primitives.
    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let half = self.scale(a, 0.5)?;
        let t = self.tanh(half)?;
        let shifted = self.add_scalar(t, 1.0)?;
        self.scale(shifted, 0.5)
    }

    pub fn square(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let ta = &self.nodes[a.0].value;
        let values = ta.values.iter().map(|&x| x * x).collect();
        let out = Tensor { shape: ta.shape.clone(), values, requires_grad: false };
        let needs = self.needs(a);
        Ok(self.push(out, Op::Square(a), needs))
    }

    pub fn sqrt(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let ta = &self.nodes[a.0].value;
        let values = ta.values.iter().map(|&x| x.sqrt()).collect();
        let out = Tensor { shape: ta.shape.clone(), values, requires_grad: false };
        let needs = self.needs(a);
        Ok(self.push(out, Op::Sqrt(a), needs))
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let ta = &self.nodes[a.0].value;
        let out = Tensor::scalar(ta.values.iter().sum());
        let needs = self.needs(a);
        Ok(self.push(out, Op::SumAll(a), needs))
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let ta = &self.nodes[a.0].value;
        if ta.numel() == 0 {
            return Err(DiffError::InvalidArg { op: "mean_all", msg: "empty tensor".into() });
        }
        let out = Tensor::scalar(ta.values.iter().sum::<f64>() / ta.numel() as f64);
        let needs = self.needs(a);
        Ok(self.push(out, Op::MeanAll(a), needs))
    }

    fn reduce_axis(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        axis: usize,
        op: Op,
        f: impl Fn(&[f64], usize, usize, usize) -> f64,
    ) -> Result<TensorId, DiffError> {
        self.check_axis(op_name, a, axis)?;
        let ta = &self.nodes[a.0].value;
        let (outer, dim, inner) = Self::axis_geometry(&ta.shape, axis);
        let mut values = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                values.push(f(&ta.values, o * dim * inner + i, dim, inner));
            }
        }
        let mut out_shape = ta.shape.clone();
        out_shape[axis] = 1;
        let out = Tensor { shape: out_shape, values, requires_grad: false };
        let needs = self.needs(a);
        Ok(self.push(out, op, needs))
    }

    /// Sum along `axis`; the axis is kept with size 1.
    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId, DiffError> {
        self.reduce_axis("sum_axis", a, axis, Op::SumAxis { input: a, axis }, |v, base, dim, inner| {
            (0..dim).map(|d| v[base + d * inner]).sum()
        })
    }

    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId, DiffError> {
        let dim_ok = {
            let s = &self.nodes[a.0].value.shape;
            axis < s.len() && s[axis] > 0
        };
        if !dim_ok {
            return Err(DiffError::InvalidArg {
                op: "mean_axis",
                msg: format!("axis {} of shape {:?}", axis, self.nodes[a.0].value.shape),
            });
        }
        self.reduce_axis("mean_axis", a, axis, Op::MeanAxis { input: a, axis }, |v, base, dim, inner| {
            (0..dim).map(|d| v[base + d * inner]).sum::<f64>() / dim as f64
        })
    }

    /// Max along `axis`; ties resolve to the lowest index in backward.
    pub fn max_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId, DiffError> {
        self.reduce_axis("max_axis", a, axis, Op::MaxAxis { input: a, axis }, |v, base, dim, inner| {
            (0..dim).map(|d| v[base + d * inner]).fold(f64::NEG_INFINITY, f64::max)
        })
    }

    /// Euclidean norm of all entries: sqrt(sum(x^2)).
    pub fn l2_norm(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let sq = self.square(a)?;
        let s = self.sum_all(sq)?;
        self.sqrt(s)
    }

    /// Elementwise product with a constant mask tensor.
    pub fn mask(&mut self, a: TensorId, m: &Tensor) -> Result<TensorId, DiffError> {
        let mid = self.constant(m.clone());
        self.mul(a, mid)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Gradients of a scalar `root` w.r.t. every node that requires grad.
    pub fn backward(&mut self, root: TensorId) -> Result<Gradients, DiffError> {
        self.backward_impl(root, None)
    }

    /// Gradients of `root` w.r.t. `targets` only; propagation is pruned to
    /// nodes on a root-to-target path. `targets` may be interior nodes.
    pub fn backward_wrt(
        &mut self,
        root: TensorId,
        targets: &[TensorId],
    ) -> Result<Gradients, DiffError> {
        self.backward_impl(root, Some(targets))
    }

    fn backward_impl(
        &mut self,
        root: TensorId,
        targets: Option<&[TensorId]>,
    ) -> Result<Gradients, DiffError> {
        let root_shape = &self.nodes[root.0].value.shape;
        if !root_shape.is_empty() {
            return Err(DiffError::NonScalarRoot(root_shape.clone()));
        }
        let n = self.nodes.len();
        let relevant: Vec<bool> = match targets {
            None => self.nodes.iter().map(|nd| nd.needs_grad).collect(),
            Some(ts) => {
                let mut rel = vec![false; n];
                for t in ts {
                    rel[t.0] = true;
                }
                for i in 0..n {
                    if rel[i] {
                        continue;
                    }
                    let hit = self.nodes[i].op_inputs().iter().any(|p| rel[p.0]);
                    if hit {
                        rel[i] = true;
                    }
                }
                rel
            }
        };

        let mut grads: Vec<Option<TensorId>> = vec![None; n];
        let seed = self.scalar_const(1.0);
        grads[root.0] = Some(seed);

        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !relevant[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let out = TensorId(i);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, &relevant, a, g)?;
                    self.accumulate(&mut grads, &relevant, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, &relevant, a, g)?;
                    if relevant[b.0] {
                        let gb = self.neg(g)?;
                        self.accumulate(&mut grads, &relevant, b, gb)?;
                    }
                }
                Op::Mul(a, b) => {
                    if relevant[a.0] {
                        let ga = self.mul(g, b)?;
                        self.accumulate(&mut grads, &relevant, a, ga)?;
                    }
                    if relevant[b.0] {
                        let gb = self.mul(g, a)?;
                        self.accumulate(&mut grads, &relevant, b, gb)?;
                    }
                }
                Op::Div(a, b) => {
                    if relevant[a.0] {
                        let ga = self.div(g, b)?;
                        self.accumulate(&mut grads, &relevant, a, ga)?;
                    }
                    if relevant[b.0] {
                        let q = self.div(out, b)?; // a / b^2
                        let gb0 = self.mul(g, q)?;
                        let gb = self.neg(gb0)?;
                        self.accumulate(&mut grads, &relevant, b, gb)?;
                    }
                }
                Op::Matmul(a, b) => {
                    if relevant[a.0] {
                        let bt = self.transpose(b)?;
                        let ga = self.matmul(g, bt)?;
                        self.accumulate(&mut grads, &relevant, a, ga)?;
                    }
                    if relevant[b.0] {
                        let at = self.transpose(a)?;
                        let gb = self.matmul(at, g)?;
                        self.accumulate(&mut grads, &relevant, b, gb)?;
                    }
                }
                Op::ScaleBy(a, s) => {
                    if relevant[a.0] {
                        let ga = self.scale_by(g, s)?;
                        self.accumulate(&mut grads, &relevant, a, ga)?;
                    }
                    if relevant[s.0] {
                        let prod = self.mul(g, a)?;
                        let gs = self.sum_all(prod)?;
                        self.accumulate(&mut grads, &relevant, s, gs)?;
                    }
                }
                Op::Scale(a, c) => {
                    if relevant[a.0] {
                        let ga = self.scale(g, c)?;
                        self.accumulate(&mut grads, &relevant, a, ga)?;
                    }
                }
                Op::AddScalar(a, _) => {
                    self.accumulate(&mut grads, &relevant, a, g)?;
                }
                Op::Permute(a, perm) => {
                    if relevant[a.0] {
                        let mut inv = vec![0usize; perm.len()];
                        for (d, &p) in perm.iter().enumerate() {
                            inv[p] = d;
                        }
                        let ga = self.permute(g, &inv)?;
                        self.accumulate(&mut grads, &relevant, a, ga)?;
                    }
                }
                Op::Reshape(a) => {
                    if relevant[a.0] {
                        let shape = self.nodes[a.0].value.shape.clone();
                        let ga = self.reshape(g, shape)?;
                        self.accumulate(&mut grads, &relevant, a, ga)?;
                    }
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for &p in &parts {
                        let len = self.nodes[p.0].value.shape[axis];
                        if relevant[p.0] {
                            let gp = self.slice(g, axis, offset, len)?;
                            self.accumulate(&mut grads, &relevant, p, gp)?;
                        }
                        offset += len;
                    }
                }
                Op::Slice { input, axis, start, len } => {
                    if relevant[input.0] {
                        let in_shape = self.nodes[input.0].value.shape.clone();
                        let after = in_shape[axis] - start - len;
                        let mut parts = Vec::with_capacity(3);
                        if start > 0 {
                            let mut s = in_shape.clone();
                            s[axis] = start;
                            parts.push(self.zeros_const(s));
                        }
                        parts.push(g);
                        if after > 0 {
                            let mut s = in_shape.clone();
                            s[axis] = after;
                            parts.push(self.zeros_const(s));
                        }
                        let ga = if parts.len() == 1 { g } else { self.concat(axis, &parts)? };
                        self.accumulate(&mut grads, &relevant, input, ga)?;
                    }
                }
                Op::Expand { input, axis, .. } => {
                    if relevant[input.0] {
                        let ga = self.sum_axis(g, axis)?;
                        self.accumulate(&mut grads, &relevant, input, ga)?;
                    }
                }
                Op::Softmax { input, axis } => {
                    if relevant[input.0] {
                        // dx = y * (g - sum(g*y, axis))
                        let dim = self.nodes[out.0].value.shape[axis];
                        let gy = self.mul(g, out)?;
                        let s = self.sum_axis(gy, axis)?;
                        let se = self.expand(s, axis, dim)?;
                        let centered = self.sub(g, se)?;
                        let ga = self.mul(out, centered)?;
                        self.accumulate(&mut grads, &relevant, input, ga)?;
                    }
                }
                Op::LeakyRelu { input, slope } => {
                    if relevant[input.0] {
                        let t = &self.nodes[input.0].value;
                        let m = Tensor {
                            shape: t.shape.clone(),
                            values: t.values.iter().map(|&x| if x > 0.0 { 1.0 } else { slope }).collect(),
                            requires_grad: false,
                        };
                        let ga = self.mask(g, &m)?;
                        self.accumulate(&mut grads, &relevant, input, ga)?;
                    }
                }
                Op::Tanh(a) => {
                    if relevant[a.0] {
                        let y2 = self.square(out)?;
                        let ny2 = self.neg(y2)?;
                        let one_m = self.add_scalar(ny2, 1.0)?;
                        let ga = self.mul(g, one_m)?;
                        self.accumulate(&mut grads, &relevant, a, ga)?;
                    }
                }
                Op::Square(a) => {
                    if relevant[a.0] {
                        let gx = self.mul(g, a)?;
                        let ga = self.scale(gx, 2.0)?;
                        self.accumulate(&mut grads, &relevant, a, ga)?;
                    }
                }
                Op::Sqrt(a) => {
                    if relevant[a.0] {
                        let two_y = self.scale(out, 2.0)?;
                        let ga = self.div(g, two_y)?;
                        self.accumulate(&mut grads, &relevant, a, ga)?;
                    }
                }
                Op::SumAll(a) => {
                    if relevant[a.0] {
                        let ones = self.constant(Tensor::ones(self.nodes[a.0].value.shape.clone()));
                        let ga = self.scale_by(ones, g)?;
                        self.accumulate(&mut grads, &relevant, a, ga)?;
                    }
                }
                Op::MeanAll(a) => {
                    if relevant[a.0] {
                        let numel = self.nodes[a.0].value.numel() as f64;
                        let ones = self.constant(Tensor::ones(self.nodes[a.0].value.shape.clone()));
                        let spread = self.scale_by(ones, g)?;
                        let ga = self.scale(spread, 1.0 / numel)?;
                        self.accumulate(&mut grads, &relevant, a, ga)?;
                    }
                }
                Op::SumAxis { input, axis } => {
                    if relevant[input.0] {
                        let dim = self.nodes[input.0].value.shape[axis];
                        let ga = self.expand(g, axis, dim)?;
                        self.accumulate(&mut grads, &relevant, input, ga)?;
                    }
                }
                Op::MeanAxis { input, axis } => {
                    if relevant[input.0] {
                        let dim = self.nodes[input.0].value.shape[axis];
                        let spread = self.expand(g, axis, dim)?;
                        let ga = self.scale(spread, 1.0 / dim as f64)?;
                        self.accumulate(&mut grads, &relevant, input, ga)?;
                    }
                }
                Op::MaxAxis { input, axis } => {
                    if relevant[input.0] {
                        let t = &self.nodes[input.0].value;
                        let (outer, dim, inner) = Self::axis_geometry(&t.shape, axis);
                        let mut m = vec![0.0; t.numel()];
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * dim * inner + i;
                                let mut best = 0;
                                for d in 1..dim {
                                    if t.values[base + d * inner] > t.values[base + best * inner] {
                                        best = d;
                                    }
                                }
                                m[base + best * inner] = 1.0;
                            }
                        }
                        let mask = Tensor { shape: t.shape.clone(), values: m, requires_grad: false };
                        let spread = self.expand(g, axis, dim)?;
                        let ga = self.mask(spread, &mask)?;
                        self.accumulate(&mut grads, &relevant, input, ga)?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &mut self,
        grads: &mut [Option<TensorId>],
        relevant: &[bool],
        target: TensorId,
        g: TensorId,
    ) -> Result<(), DiffError> {
        if !relevant[target.0] {
            return Ok(());
        }
        grads[target.0] = Some(match grads[target.0] {
            Some(old) => self.add(old, g)?,
            None => g,
        });
        Ok(())
    }

    /// Gradient value for a node, if any was accumulated.
    pub fn grad(&self, grads: &Gradients, t: TensorId) -> Option<&Tensor> {
        grads.id(t).map(|g| self.value(g))
    }

    /// Gradient value, densified to zeros when no path reached the node.
    pub fn grad_or_zeros(&self, grads: &Gradients, t: TensorId) -> Tensor {
        match self.grad(grads, t) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.value(t).shape.to_vec()),
        }
    }
}

impl Node {
    fn op_inputs(&self) -> Vec<TensorId> {
        match &self.op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Matmul(a, b)
            | Op::ScaleBy(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::AddScalar(a, _) | Op::Tanh(a) | Op::Square(a) | Op::Sqrt(a) => {
                vec![*a]
            }
            Op::Permute(a, _) | Op::Reshape(a) | Op::SumAll(a) | Op::MeanAll(a) => vec![*a],
            Op::Concat(parts, _) => parts.clone(),
            Op::Slice { input, .. }
            | Op::Expand { input, .. }
            | Op::Softmax { input, .. }
            | Op::LeakyRelu { input, .. }
            | Op::SumAxis { input, .. }
            | Op::MeanAxis { input, .. }
            | Op::MaxAxis { input, .. } => vec![*input],
        }
    }
}
