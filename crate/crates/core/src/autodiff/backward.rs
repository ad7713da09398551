use super::graph::{conv_dims, Graph, OpKind, Var};
use super::kernels::{self, axis_extents};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients of a scalar loss with respect to every differentiable leaf.
///
/// Leaves created with [`Graph::input`] always have an entry; leaves that did
/// not contribute to the loss get zeros. Constants and interior nodes have
/// no entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`; panics if `v` is not a differentiable leaf of the
    /// graph this map came from.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v).expect("no gradient recorded for this node")
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// `(node id, gradient)` pairs in topological order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }
}

impl Graph {
    /// Reverse-mode sweep from `loss`, which must hold a single value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            acc[loss.0] = Some(vec![1.0]);
        }

        for id in (0..n).rev() {
            let node = &self.nodes[id];
            let Some(kind) = node.kind.as_ref() else { continue };
            let Some(g) = acc[id].take() else { continue };
            let wants: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let parts = self.local_grads(kind, id, &g, &wants);
            for ((input, want), part) in node.inputs.iter().zip(&wants).zip(parts) {
                if !want {
                    continue;
                }
                if let Some(part) = part {
                    accumulate(&mut acc[input.0], part);
                }
            }
        }

        let grads = (0..self.nodes.len())
            .map(|id| {
                let node = &self.nodes[id];
                if node.kind.is_some() || !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                let data = acc.get_mut(id).and_then(Option::take).unwrap_or_else(|| vec![0.0; node.value.len()]);
                Some(Tensor::new(shape, data).expect("gradient matches leaf shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of one node for each of its inputs.
    fn local_grads(&self, kind: &OpKind, id: usize, g: &[f64], wants: &[bool]) -> Vec<Option<Vec<f64>>> {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[node.inputs[i].0].value;
        let out = &node.value;
        let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Vec<f64>>> {
            vec![Some(g.iter().enumerate().map(|(i, &gi)| gi * f(i)).collect())]
        };
        match kind {
            OpKind::Add => vec![wants[0].then(|| g.to_vec()), wants[1].then(|| reduce_broadcast(g, val(1).len()))],
            OpKind::Sub => vec![
                wants[0].then(|| g.to_vec()),
                wants[1].then(|| reduce_broadcast(g, val(1).len()).into_iter().map(|v| -v).collect()),
            ],
            OpKind::Mul => {
                let (a, b) = (val(0).data(), val(1).data());
                let bl = b.len();
                let ga = wants[0].then(|| g.iter().enumerate().map(|(i, &gi)| gi * b[i % bl]).collect());
                let gb = wants[1].then(|| {
                    let prod: Vec<f64> = g.iter().zip(a).map(|(x, y)| x * y).collect();
                    reduce_broadcast(&prod, bl)
                });
                vec![ga, gb]
            }
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                vec![
                    wants[0].then(|| kernels::matmul_bt(g, b.data(), m, k, n)),
                    wants[1].then(|| kernels::matmul_at(a.data(), g, m, k, n)),
                ]
            }
            OpKind::Sigmoid => {
                let y = out.data();
                elementwise(&|i| y[i] * (1.0 - y[i]))
            }
            OpKind::Tanh => {
                let y = out.data();
                elementwise(&|i| 1.0 - y[i] * y[i])
            }
            OpKind::Relu => {
                let x = val(0).data();
                elementwise(&|i| if x[i] > 0.0 { 1.0 } else { 0.0 })
            }
            OpKind::Square => {
                let x = val(0).data();
                elementwise(&|i| 2.0 * x[i])
            }
            OpKind::Scale(c) => elementwise(&|_| *c),
            OpKind::Ln => {
                let x = val(0).data();
                elementwise(&|i| 1.0 / x[i])
            }
            OpKind::Clamp { lo, hi } => {
                let x = val(0).data();
                elementwise(&|i| if x[i] >= *lo && x[i] <= *hi { 1.0 } else { 0.0 })
            }
            OpKind::Sum => vec![Some(vec![g[0]; val(0).len()])],
            OpKind::Mean => {
                let len = val(0).len();
                vec![Some(vec![g[0] / len as f64; len])]
            }
            OpKind::Conv1d => {
                let d = conv_dims(val(0), val(1)).expect("validated in forward");
                let (gx, gw) = kernels::conv1d_backward(val(0).data(), val(1).data(), g, d, wants[0], wants[1]);
                vec![gx, gw]
            }
            OpKind::MaxPool1d { .. } => {
                let mut gx = vec![0.0; val(0).len()];
                for (&src, &gi) in node.saved.iter().zip(g) {
                    gx[src] += gi;
                }
                vec![Some(gx)]
            }
            OpKind::Concat { axis } => {
                let (outer, total, inner) = axis_extents(out.shape(), *axis);
                let mut offset = 0;
                node.inputs
                    .iter()
                    .zip(wants)
                    .map(|(v, &want)| {
                        let len = self.nodes[v.0].value.shape()[*axis];
                        let part = want.then(|| {
                            let mut buf = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                buf.extend_from_slice(&g[base..base + len * inner]);
                            }
                            buf
                        });
                        offset += len;
                        part
                    })
                    .collect()
            }
            OpKind::Slice { axis, start, len } => {
                let (outer, dim, inner) = axis_extents(val(0).shape(), *axis);
                let mut gx = vec![0.0; val(0).len()];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(gx)]
            }
            OpKind::Reshape { .. } => vec![Some(g.to_vec())],
        }
    }
}

/// Sum a gradient of the broadcast (left) shape back to the right operand's
/// `len` elements.
fn reduce_broadcast(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks(len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, part: Vec<f64>) {
    match slot {
        None => *slot = Some(part),
        Some(buf) => {
            for (b, p) in buf.iter_mut().zip(part) {
                *b += p;
            }
        }
    }
}
