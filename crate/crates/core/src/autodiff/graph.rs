//! Computation graph with reverse-mode differentiation.
//!
//! Every op evaluates eagerly and, when any input requires a gradient,
//! records its backward rule. Node ids increase in execution order, so a
//! reverse sweep over ids is a valid topological order.
//!
//! Broadcasting is limited to a right operand whose shape equals a
//! trailing suffix of the left operand's shape (bias over leading batch
//! dimensions).

use std::borrow::Cow;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{axis_split, matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use crate::error::{Error, Result};
use crate::losses_metrics::kernel;
use crate::vocab::PAD;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Transpose(NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
        mask_pad: bool,
    },
    Reduce {
        x: NodeId,
        axis: Option<usize>,
        kind: Reduction,
    },
    Select {
        mask: Vec<bool>,
        a: NodeId,
        b: NodeId,
    },
    MaskMul {
        x: NodeId,
        mask: Vec<f64>,
    },
    LayerNorm {
        x: NodeId,
        inv_std: Vec<f64>,
    },
    Focal {
        logits: NodeId,
        targets: Vec<usize>,
        gamma: f64,
        alpha: f64,
    },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    requires_grad: bool,
    op: Op,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    params: HashMap<ParamId, NodeId>,
    frozen: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Folds a gradient over the leading dims onto a broadcast operand.
fn reduce_broadcast(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        add_into(&mut out, chunk);
    }
    out
}

impl<'a> Graph<'a> {
    /// A graph that tracks gradients for trainable parameters.
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph where parameters enter as constants; nothing is recorded.
    pub fn inference() -> Self {
        Self {
            frozen: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, requires_grad: bool, op: Op) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn push_owned(&mut self, value: Tensor, inputs: &[NodeId], op: Op) -> Result<NodeId> {
        let rg = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.push(Cow::Owned(value), rg, op)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.leaf_grads.get(&id.0).map(Vec::as_slice)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            requires_grad: false,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            requires_grad: true,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Borrows a parameter as a leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: Cow::Borrowed(&p.value),
            requires_grad: p.trainable && !self.frozen,
            op: Op::Leaf,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.params.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul")?;
        let (k2, n) = bv.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        self.push_owned(Tensor::matrix(m, n, out), &[a, b], Op::MatMul(a, b))
    }

    fn broadcast_check(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.is_empty() || !is_suffix(av.shape(), bv.shape()) {
            return Err(shape_err(op, av, bv));
        }
        Ok(())
    }

    /// `a + b`, with `b` broadcast over `a`'s leading dims.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_check("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = bv.len();
        let mut out = av.data().to_vec();
        for chunk in out.chunks_mut(n) {
            add_into(chunk, bv.data());
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        self.push_owned(t, &[a, b], Op::Add(a, b))
    }

    /// Elementwise `a ⊙ b`, with `b` broadcast over `a`'s leading dims.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_check("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = bv.len();
        let mut out = av.data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (x, y) in chunk.iter_mut().zip(bv.data()) {
                *x *= y;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        self.push_owned(t, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect())?;
        self.push_owned(t, &[a], Op::Scale(a, c))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect())?;
        self.push_owned(t, &[a], op)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh form: `0.5 x (1 + tanh(sqrt(2/π) (x + 0.044715 x³)))`.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.softmax_masked(x, axis, None)
    }

    /// Softmax along `axis`. Positions with `mask[k] == false` get weight
    /// exactly zero; a lane with every position masked is all zeros.
    pub fn softmax_masked(
        &mut self,
        x: NodeId,
        axis: usize,
        mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(Error::Invalid(format!(
                "softmax axis {axis} out of range for shape {:?}",
                xv.shape()
            )));
        }
        let (outer, n, inner) = axis_split(xv.shape(), axis);
        if n == 0 {
            return Err(Error::EmptyAxis { op: "softmax" });
        }
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::Shape {
                    op: "softmax mask",
                    lhs: xv.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let keep = |k: usize| mask.is_none_or(|m| m[k]);
        let d = xv.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n)
                    .filter(|&k| keep(k))
                    .map(|k| d[at(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                if mx == f64::NEG_INFINITY {
                    continue;
                }
                let mut z = 0.0;
                for k in (0..n).filter(|&k| keep(k)) {
                    let e = (d[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in (0..n).filter(|&k| keep(k)) {
                    out[at(k)] /= z;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push_owned(t, &[x], Op::Softmax { x, axis })
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or(Error::Empty("concat operands"))
            .map(|&p| self.value(p))?;
        if axis >= first.ndim() {
            return Err(Error::Invalid(format!("concat axis {axis} out of range")));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for &p in parts {
            let pv = self.value(p);
            let same = pv.ndim() == first.ndim()
                && (0..pv.ndim()).all(|d| d == axis || pv.shape()[d] == first.shape()[d]);
            if !same {
                return Err(shape_err("concat", first, pv));
            }
            shape[axis] += pv.shape()[axis];
        }
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let w = pv.shape()[axis] * inner;
                out.extend_from_slice(&pv.data()[o * w..(o + 1) * w]);
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push_owned(
            t,
            parts,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if axis >= xv.ndim() || start + len > xv.shape()[axis] {
            return Err(Error::Invalid(format!(
                "slice [{start}, {}) on axis {axis} out of range for shape {:?}",
                start + len,
                xv.shape()
            )));
        }
        let (outer, n, inner) = axis_split(xv.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        self.push_owned(t, &[x], Op::Slice { x, axis, start })
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("transpose")?;
        let d = xv.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push_owned(Tensor::matrix(c, r, out), &[x], Op::Transpose(x))
    }

    /// Rows of `table` at `ids`. With `mask_pad`, PAD ids yield a zero row
    /// and send no gradient back to the table.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], mask_pad: bool) -> Result<NodeId> {
        let tv = self.value(table);
        let (v, e) = tv.dims2("embedding")?;
        let mut out = vec![0.0; ids.len() * e];
        for (r, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::IndexOutOfRange { index: id, bound: v });
            }
            if mask_pad && id == PAD {
                continue;
            }
            out[r * e..(r + 1) * e].copy_from_slice(tv.row(id));
        }
        self.push_owned(
            Tensor::matrix(ids.len(), e, out),
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                mask_pad,
            },
        )
    }

    pub fn sum(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce(x, axis, Reduction::Sum)
    }

    pub fn mean(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce(x, axis, Reduction::Mean)
    }

    fn reduce(&mut self, x: NodeId, axis: Option<usize>, kind: Reduction) -> Result<NodeId> {
        let xv = self.value(x);
        let t = match axis {
            None => {
                if xv.is_empty() {
                    return Err(Error::EmptyAxis { op: "reduce" });
                }
                let s: f64 = xv.data().iter().sum();
                Tensor::scalar(match kind {
                    Reduction::Sum => s,
                    Reduction::Mean => s / xv.len() as f64,
                })
            }
            Some(axis) => {
                if axis >= xv.ndim() {
                    return Err(Error::Invalid(format!("reduce axis {axis} out of range")));
                }
                let (outer, n, inner) = axis_split(xv.shape(), axis);
                if n == 0 {
                    return Err(Error::EmptyAxis { op: "reduce" });
                }
                let d = xv.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            out[o * inner + i] += d[(o * n + k) * inner + i];
                        }
                    }
                }
                if kind == Reduction::Mean {
                    out.iter_mut().for_each(|v| *v /= n as f64);
                }
                let mut shape = xv.shape().to_vec();
                shape.remove(axis);
                Tensor::new(shape, out)?
            }
        };
        self.push_owned(t, &[x], Op::Reduce { x, axis, kind })
    }

    /// Row-wise choice along axis 0: row `r` comes from `a` when `mask[r]`,
    /// otherwise from `b`.
    pub fn select(&mut self, mask: &[bool], a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.ndim() == 0 || av.shape()[0] != mask.len() {
            return Err(shape_err("select", av, bv));
        }
        let w = av.len() / mask.len().max(1);
        let mut out = bv.data().to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out[r * w..(r + 1) * w].copy_from_slice(&av.data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        self.push_owned(
            t,
            &[a, b],
            Op::Select {
                mask: mask.to_vec(),
                a,
                b,
            },
        )
    }

    /// Elementwise product with a constant mask of the same shape.
    pub fn mask_mul(&mut self, x: NodeId, mask: &Tensor) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape() != mask.shape() {
            return Err(shape_err("mask_mul", xv, mask));
        }
        let out = xv.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push_owned(
            t,
            &[x],
            Op::MaskMul {
                x,
                mask: mask.data().to_vec(),
            },
        )
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`. Identity
    /// when `train` is false or `rate` is zero.
    pub fn dropout(&mut self, x: NodeId, rate: f64, seed: u64, train: bool) -> Result<NodeId> {
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.shape(x), rate, &mut ChaCha8Rng::seed_from_u64(seed))?;
        self.mask_mul(x, &mask)
    }

    /// Normalizes over the last axis to zero mean and unit variance
    /// (population variance plus `eps`).
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let n = *xv.shape().last().ok_or(Error::EmptyAxis { op: "layer_norm" })?;
        if n == 0 {
            return Err(Error::EmptyAxis { op: "layer_norm" });
        }
        let mut out = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mu) * is);
            inv_std.push(is);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push_owned(t, &[x], Op::LayerNorm { x, inv_std })
    }

    /// Per-row focal loss `-alpha (1 - p_t)^gamma log p_t` over softmax of
    /// `logits` (rows × classes). Output has shape `[rows]`.
    pub fn focal_loss(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        gamma: f64,
        alpha: f64,
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        let (r, c) = lv.dims2("focal_loss")?;
        if targets.len() != r {
            return Err(Error::Shape {
                op: "focal_loss",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut out = Vec::with_capacity(r);
        for (row, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::IndexOutOfRange { index: t, bound: c });
            }
            out.push(kernel::focal(lv.row(row), t, gamma, alpha).loss);
        }
        self.push_owned(
            Tensor::vector(out),
            &[logits],
            Op::Focal {
                logits,
                targets: targets.to_vec(),
                gamma,
                alpha,
            },
        )
    }

    /// Propagates d`loss`/d(node) back through the graph and adds the
    /// result into every tracked leaf's accumulator.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match self.leaf_grads.get_mut(&i) {
                    Some(acc) => add_into(acc, &g),
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                }
                continue;
            }
            backprop(&self.nodes, &node.op, &node.value, &g, &mut grads);
        }
        Ok(())
    }

    /// Gradients of the parameters borrowed into this graph.
    pub fn param_grads(&self) -> ParamGrads {
        let n = self.params.keys().map(|p| p.0 + 1).max().unwrap_or(0);
        let mut grads = vec![None; n];
        for (pid, nid) in &self.params {
            if let Some(g) = self.leaf_grads.get(&nid.0) {
                grads[pid.0] = Some(g.clone());
            }
        }
        ParamGrads { grads }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Inverted-dropout mask of the given shape.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Invalid(format!("dropout rate {rate} not in [0, 1)")));
    }
    let keep = 1.0 - rate;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Sigmoid(_) => "sigmoid",
        Op::Tanh(_) => "tanh",
        Op::Relu(_) => "relu",
        Op::Gelu(_) => "gelu",
        Op::Softmax { .. } => "softmax",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Transpose(_) => "transpose",
        Op::Embedding { .. } => "embedding",
        Op::Reduce { .. } => "reduce",
        Op::Select { .. } => "select",
        Op::MaskMul { .. } => "mask_mul",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Focal { .. } => "focal_loss",
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node<'_>], id: NodeId) -> Option<&'g mut [f64]> {
    if !nodes[id.0].requires_grad {
        return None;
    }
    let n = nodes[id.0].value.len();
    Some(grads[id.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn backprop(
    nodes: &[Node<'_>],
    op: &Op,
    out: &Tensor,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let val = |id: NodeId| -> &Tensor { &nodes[id.0].value };
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if let Some(da) = acc(grads, nodes, *a) {
                matmul_bt_acc(g, bv.data(), da, m, n, k);
            }
            if let Some(db) = acc(grads, nodes, *b) {
                matmul_at_acc(av.data(), g, db, m, k, n);
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = acc(grads, nodes, *a) {
                add_into(da, g);
            }
            let n = val(*b).len();
            if let Some(db) = acc(grads, nodes, *b) {
                add_into(db, &reduce_broadcast(g, n));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let n = bv.len();
            if let Some(da) = acc(grads, nodes, *a) {
                for (dst, gc) in da.chunks_mut(n).zip(g.chunks(n)) {
                    for ((d, gv), bb) in dst.iter_mut().zip(gc).zip(bv.data()) {
                        *d += gv * bb;
                    }
                }
            }
            if b != a {
                if let Some(db) = acc(grads, nodes, *b) {
                    for (gc, ac) in g.chunks(n).zip(av.data().chunks(n)) {
                        for ((d, gv), aa) in db.iter_mut().zip(gc).zip(ac) {
                            *d += gv * aa;
                        }
                    }
                }
            } else if let Some(da) = acc(grads, nodes, *a) {
                // x ⊙ x: second factor's contribution.
                for ((d, gv), aa) in da.iter_mut().zip(g).zip(av.data()) {
                    *d += gv * aa;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(da) = acc(grads, nodes, *a) {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += c * gv;
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(da) = acc(grads, nodes, *a) {
                for ((d, gv), y) in da.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * y * (1.0 - y);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(da) = acc(grads, nodes, *a) {
                for ((d, gv), y) in da.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * (1.0 - y * y);
                }
            }
        }
        Op::Relu(a) => {
            let av = val(*a);
            if let Some(da) = acc(grads, nodes, *a) {
                for ((d, gv), x) in da.iter_mut().zip(g).zip(av.data()) {
                    if *x > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let av = val(*a);
            if let Some(da) = acc(grads, nodes, *a) {
                for ((d, gv), x) in da.iter_mut().zip(g).zip(av.data()) {
                    *d += gv * gelu_grad(*x);
                }
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            if let Some(dx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            dx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let w = val(p).shape()[*axis];
                if let Some(dp) = acc(grads, nodes, p) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        add_into(
                            &mut dp[o * w * inner..(o + 1) * w * inner],
                            &g[src..src + w * inner],
                        );
                    }
                }
                offset += w;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, n, inner) = axis_split(val(*x).shape(), *axis);
            let len = out.shape()[*axis];
            if let Some(dx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    add_into(
                        &mut dx[dst..dst + len * inner],
                        &g[o * len * inner..(o + 1) * len * inner],
                    );
                }
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            if let Some(dx) = acc(grads, nodes, *x) {
                // out is r×c, x is c×r
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Embedding {
            table,
            ids,
            mask_pad,
        } => {
            let e = val(*table).shape()[1];
            if let Some(dt) = acc(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    if *mask_pad && id == PAD {
                        continue;
                    }
                    add_into(&mut dt[id * e..(id + 1) * e], &g[r * e..(r + 1) * e]);
                }
            }
        }
        Op::Reduce { x, axis, kind } => {
            let xv = val(*x);
            if let Some(dx) = acc(grads, nodes, *x) {
                match axis {
                    None => {
                        let s = match kind {
                            Reduction::Sum => g[0],
                            Reduction::Mean => g[0] / xv.len() as f64,
                        };
                        dx.iter_mut().for_each(|d| *d += s);
                    }
                    Some(axis) => {
                        let (outer, n, inner) = axis_split(xv.shape(), *axis);
                        let f = match kind {
                            Reduction::Sum => 1.0,
                            Reduction::Mean => 1.0 / n as f64,
                        };
                        for o in 0..outer {
                            for k in 0..n {
                                for i in 0..inner {
                                    dx[(o * n + k) * inner + i] += f * g[o * inner + i];
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::Select { mask, a, b } => {
            let w = out.len() / mask.len().max(1);
            for (target, want) in [(*a, true), (*b, false)] {
                if let Some(d) = acc(grads, nodes, target) {
                    for (r, &m) in mask.iter().enumerate() {
                        if m == want {
                            add_into(&mut d[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                        }
                    }
                }
            }
        }
        Op::MaskMul { x, mask } => {
            if let Some(dx) = acc(grads, nodes, *x) {
                for ((d, gv), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }
        }
        Op::LayerNorm { x, inv_std } => {
            let n = *out.shape().last().unwrap();
            if let Some(dx) = acc(grads, nodes, *x) {
                for (r, is) in inv_std.iter().enumerate() {
                    let span = r * n..(r + 1) * n;
                    let (gr, yr) = (&g[span.clone()], &out.data()[span.clone()]);
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for ((d, gv), y) in dx[span].iter_mut().zip(gr).zip(yr) {
                        *d += is * (gv - mg - y * mgy);
                    }
                }
            }
        }
        Op::Focal {
            logits,
            targets,
            gamma,
            alpha,
        } => {
            let lv = val(*logits);
            let c = lv.shape()[1];
            if let Some(dl) = acc(grads, nodes, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    let gr = kernel::focal_grad(lv.row(r), t, *gamma, *alpha);
                    for (d, v) in dl[r * c..(r + 1) * c].iter_mut().zip(gr) {
                        *d += g[r] * v;
                    }
                }
            }
        }
    }
}
