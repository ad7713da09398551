use super::kernels::{self, axis_extents, ConvDims};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    /// Position of the node in the graph's topological order.
    pub fn id(self) -> usize {
        self.0
    }
}

/// The closed set of differentiable operations.
///
/// Binary elementwise ops (`Add`, `Sub`, `Mul`) accept a right operand whose
/// shape is a suffix of the left operand's shape; it is repeated over the
/// leading dims. `Conv1d` takes `[batch, len, c_in]` and a kernel
/// `[width, c_in, c_out]` with valid padding. `MaxPool1d` pools the middle
/// axis of `[batch, len, c]` with stride equal to `size`, dropping a ragged
/// tail.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Sigmoid,
    Tanh,
    Relu,
    Conv1d,
    MaxPool1d { size: usize },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape { shape: Vec<usize> },
    Mean,
    Sum,
    Square,
    Scale(f64),
    Ln,
    Clamp { lo: f64, hi: f64 },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Conv1d => "conv1d",
            OpKind::MaxPool1d { .. } => "max_pool1d",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Square => "square",
            OpKind::Scale(_) => "scale",
            OpKind::Ln => "ln",
            OpKind::Clamp { .. } => "clamp",
        }
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub kind: Option<OpKind>,
    pub inputs: Vec<Var>,
    pub requires_grad: bool,
    /// Flat argmax positions for `MaxPool1d`.
    pub saved: Vec<usize>,
}

/// A tape of recorded operations. Nodes are appended in execution order, so
/// every node's inputs precede it.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf treated as a constant; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, kind: None, inputs: Vec::new(), requires_grad, saved: Vec::new() });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        self.nodes[v.0].kind.is_none()
    }

    /// Distance of the recorded inputs to the nearest point where a
    /// piecewise op (relu, clamp, max-pool) switches branch. Pooling windows
    /// whose leading values are exact zeros are skipped: those come from an
    /// inactive relu and are flat on both sides. Infinite when the graph has
    /// no piecewise op.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let Some(kind) = &node.kind else { continue };
            let x = self.nodes[node.inputs[0].0].value.data();
            match kind {
                OpKind::Relu => margin = x.iter().fold(margin, |m, v| m.min(v.abs())),
                OpKind::Clamp { lo, hi } => {
                    margin = x.iter().fold(margin, |m, v| m.min((v - lo).abs()).min((v - hi).abs()))
                }
                OpKind::MaxPool1d { size } => {
                    let shape = self.nodes[node.inputs[0].0].value.shape();
                    let (b, len, c) = (shape[0], shape[1], shape[2]);
                    for bi in 0..b {
                        for t in 0..len / size {
                            for ci in 0..c {
                                let mut w: Vec<f64> =
                                    (0..*size).map(|k| x[(bi * len + t * size + k) * c + ci]).collect();
                                w.sort_by(|a, b| b.total_cmp(a));
                                if w.len() > 1 && w[0] != 0.0 {
                                    margin = margin.min(w[0] - w[1]);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Record `kind` applied to `inputs` and return the output node.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity_ok = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul | OpKind::Conv1d => inputs.len() == 2,
            OpKind::Concat { .. } => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(Error::shape(kind.name(), format!("wrong number of inputs: {}", inputs.len())));
        }
        let (value, saved) = self.eval(&kind, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, kind: Some(kind), inputs: inputs.to_vec(), requires_grad, saved });
        Ok(Var(self.nodes.len() - 1))
    }

    fn eval(&self, kind: &OpKind, inputs: &[Var]) -> Result<(Tensor, Vec<usize>)> {
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        let name = kind.name();
        let out = match kind {
            OpKind::Add => broadcast_binary(name, v(0), v(1), |a, b| a + b)?,
            OpKind::Sub => broadcast_binary(name, v(0), v(1), |a, b| a - b)?,
            OpKind::Mul => broadcast_binary(name, v(0), v(1), |a, b| a * b)?,
            OpKind::MatMul => {
                let (a, b) = (v(0), v(1));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(Error::shape(name, format!("cannot multiply {:?} by {:?}", a.shape(), b.shape())));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))?
            }
            OpKind::Sigmoid => map(v(0), sigmoid),
            OpKind::Tanh => map(v(0), f64::tanh),
            OpKind::Relu => map(v(0), |x| if x > 0.0 { x } else { 0.0 }),
            OpKind::Square => map(v(0), |x| x * x),
            OpKind::Scale(c) => map(v(0), |x| c * x),
            OpKind::Ln => {
                if let Some(bad) = v(0).data().iter().find(|&&x| x.is_nan() || x <= 0.0) {
                    return Err(Error::Domain { op: name, detail: format!("logarithm of non-positive value {bad}") });
                }
                map(v(0), f64::ln)
            }
            OpKind::Clamp { lo, hi } => {
                if lo > hi {
                    return Err(Error::Domain { op: name, detail: format!("empty range [{lo}, {hi}]") });
                }
                map(v(0), |x| x.clamp(*lo, *hi))
            }
            OpKind::Sum => Tensor::scalar(v(0).data().iter().sum()),
            OpKind::Mean => {
                let x = v(0);
                if x.is_empty() {
                    return Err(Error::shape(name, "mean of an empty tensor"));
                }
                Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
            }
            OpKind::Conv1d => {
                let d = conv_dims(v(0), v(1))?;
                Tensor::new(vec![d.batch, d.out_len(), d.c_out], kernels::conv1d(v(0).data(), v(1).data(), d))?
            }
            OpKind::MaxPool1d { size } => return max_pool(v(0), *size),
            OpKind::Concat { axis } => {
                let parts: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                concat(&parts, *axis)?
            }
            OpKind::Slice { axis, start, len } => slice(v(0), *axis, *start, *len)?,
            OpKind::Reshape { shape } => v(0).clone().reshaped(shape)?,
        };
        Ok((out, Vec::new()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        self.apply(OpKind::Conv1d, &[x, kernel])
    }

    pub fn max_pool1d(&mut self, x: Var, size: usize) -> Result<Var> {
        self.apply(OpKind::MaxPool1d { size }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(OpKind::Slice { axis, start, len }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Square, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Ln, &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(OpKind::Clamp { lo, hi }, &[x])
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// True when `b` can be repeated over the leading dims of `a`.
pub(crate) fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn broadcast_binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if !broadcastable(a.shape(), b.shape()) {
        return Err(Error::shape(op, format!("right operand {:?} does not broadcast to {:?}", b.shape(), a.shape())));
    }
    let bd = b.data();
    let data =
        a.data().chunks(bd.len().max(1)).flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y))).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub(crate) fn conv_dims(x: &Tensor, w: &Tensor) -> Result<ConvDims> {
    if x.rank() != 3 || w.rank() != 3 {
        return Err(Error::shape(
            "conv1d",
            format!("expected [batch, len, c_in] and [width, c_in, c_out], got {:?} and {:?}", x.shape(), w.shape()),
        ));
    }
    let d = ConvDims {
        batch: x.shape()[0],
        len: x.shape()[1],
        c_in: x.shape()[2],
        width: w.shape()[0],
        c_out: w.shape()[2],
    };
    if w.shape()[1] != d.c_in {
        return Err(Error::shape("conv1d", format!("input has {} channels, kernel expects {}", d.c_in, w.shape()[1])));
    }
    if d.width == 0 || d.len < d.width {
        return Err(Error::shape("conv1d", format!("kernel width {} does not fit length {}", d.width, d.len)));
    }
    Ok(d)
}

fn max_pool(x: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    if x.rank() != 3 || size == 0 || x.shape()[1] < size {
        return Err(Error::shape("max_pool1d", format!("cannot pool {:?} with size {size}", x.shape())));
    }
    let (b, len, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let out_len = len / size;
    let mut out = Vec::with_capacity(b * out_len * c);
    let mut argmax = Vec::with_capacity(b * out_len * c);
    let xd = x.data();
    for bi in 0..b {
        for t in 0..out_len {
            for ci in 0..c {
                let mut best = (bi * len + t * size) * c + ci;
                for k in 1..size {
                    let idx = (bi * len + t * size + k) * c + ci;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![b, out_len, c], out)?, argmax))
}

fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts[0];
    if axis >= first.rank() {
        return Err(Error::shape("concat", format!("axis {axis} out of range for {:?}", first.shape())));
    }
    let mut total = 0;
    for p in parts {
        let same = p.rank() == first.rank()
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(Error::shape("concat", format!("{:?} vs {:?} along axis {axis}", first.shape(), p.shape())));
        }
        total += p.shape()[axis];
    }
    let (outer, _, inner) = axis_extents(first.shape(), axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(shape, data)
}

fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(Error::shape("slice", format!("[{start}, {}) along axis {axis} of {:?}", start + len, x.shape())));
    }
    let (outer, dim, inner) = axis_extents(x.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn kink_margin() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 4, 1], &[0.3, -0.05, 0.0, 0.0]));
        assert_eq!(g.kink_margin(), f64::INFINITY);
        g.relu(x).unwrap();
        assert_eq!(g.kink_margin(), 0.0);
        let mut g = Graph::new();
        let x = g.input(t(&[1, 4, 1], &[0.3, 0.25, 0.0, 0.0]));
        g.max_pool1d(x, 2).unwrap();
        assert!((g.kink_margin() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(0.0));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), Some(0.5));
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = g.input(t(&[2, 1], &[3.0, 4.0]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), &t(&[2, 1], &[3.0, 4.0]));
    }

    #[test]
    fn tanh_at_ten_matches_high_precision_reference() {
        // 30-digit reference: tanh(10) = 0.999999995877692763619592837138
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(10.0));
        let y = g.tanh(x).unwrap();
        let v = g.value(y).item().unwrap();
        assert!((v - 0.999_999_995_877_692_8).abs() < 1e-9);
        // independent closed form 1 - 2/(e^20 + 1)
        assert!((v - (1.0 - 2.0 / (20f64.exp() + 1.0))).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_name_the_op_and_dims() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.input(Tensor::zeros(&[2]));
        assert!(g.add(a, c).is_err());
        let w = g.input(Tensor::zeros(&[3, 2, 4]));
        let err = g.conv1d(a, w).unwrap_err().to_string();
        assert!(err.contains("conv1d"), "{err}");
    }

    #[test]
    fn broadcast_add_repeats_bias_over_rows() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let b = g.input(t(&[3], &[10.0, 20.0, 30.0]));
        let y = g.add(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
    }

    #[test]
    fn concat_and_slice_are_inverse_on_middle_axis() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 3, 2]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]);
        let s = g.slice(c, 1, 1, 2).unwrap();
        assert_eq!(g.value(s), g.value(b));
    }

    #[test]
    fn max_pool_drops_ragged_tail() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 5, 1], &[1.0, 3.0, 2.0, 0.5, 9.0]));
        let y = g.max_pool1d(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 2.0]);
    }

    #[test]
    fn ln_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.ln(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn inputs_precede_outputs() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(1.0));
        let y = g.square(x).unwrap();
        let z = g.add(y, x).unwrap();
        for (id, node) in g.nodes.iter().enumerate() {
            assert!(node.inputs.iter().all(|v| v.id() < id));
        }
        assert!(x.id() < y.id() && y.id() < z.id());
    }
}
