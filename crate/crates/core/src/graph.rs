//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once per forward pass from leaves (named parameters
//! or inputs), constants and primitive ops. Node ids are handed out in
//! construction order and every op only refers to earlier nodes, so the
//! graph is acyclic and construction order is a valid topological order.
//! Shapes are checked when the graph is evaluated against concrete leaf
//! values, and a failure names the offending node.
//!
//! Broadcasting is limited to a one-element operand in `add`/`mul`; any other
//! shape change must be spelled out with `reshape`, `concat` or a matmul
//! against a constant.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::GraphError;
use crate::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Parameter,
    Input,
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf {
        name: String,
        kind: LeafKind,
    },
    Constant(Tensor),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// `log(1 + exp(x))`, evaluated as `max(x, 0) + log1p(exp(-|x|))`.
    Softplus(NodeId),
    Softmax(NodeId, usize),
    /// Normalises each row of a matrix, then applies a per-column gain and bias.
    LayerNorm {
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    /// Sum over one axis (kept with size 1) or over everything (`None`, shape `[1]`).
    ReduceSum(NodeId, Option<usize>),
    ReduceMean(NodeId, Option<usize>),
    Scale(NodeId, f64),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ReduceSum(..) => "reduce_sum",
            Op::ReduceMean(..) => "reduce_mean",
            Op::Scale(..) => "scale",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } | Op::Constant(_) => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Concat(xs, _) => xs.clone(),
            Op::LayerNorm { input, gain, bias, .. } => vec![*input, *gain, *bias],
            Op::Slice { input, .. } => vec![*input],
            Op::Transpose(x)
            | Op::Reshape(x, _)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Softplus(x)
            | Op::Softmax(x, _)
            | Op::ReduceSum(x, _)
            | Op::ReduceMean(x, _)
            | Op::Scale(x, _) => vec![*x],
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Op>,
    leaves: HashMap<String, NodeId>,
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

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0]
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// Names of all leaves of the given kind, sorted.
    pub fn leaf_names(&self, kind: LeafKind) -> Vec<String> {
        let mut names: Vec<String> = self
            .leaves
            .iter()
            .filter(|(_, id)| matches!(&self.nodes[id.0], Op::Leaf { kind: k, .. } if *k == kind))
            .map(|(n, _)| n.clone())
            .collect();
        names.sort();
        names
    }

    fn push(&mut self, op: Op) -> NodeId {
        debug_assert!(op.operands().iter().all(|o| o.0 < self.nodes.len()));
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, name: &str, kind: LeafKind) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let id = self.push(Op::Leaf {
            name: name.to_string(),
            kind,
        });
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// Declares (or reuses) a trainable leaf.
    pub fn parameter(&mut self, name: &str) -> NodeId {
        self.leaf(name, LeafKind::Parameter)
    }

    /// Declares (or reuses) a data leaf.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.leaf(name, LeafKind::Input)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape(x, shape))
    }

    pub fn concat(&mut self, xs: Vec<NodeId>, axis: usize) -> NodeId {
        self.push(Op::Concat(xs, axis))
    }

    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        self.push(Op::Slice {
            input,
            axis,
            start,
            len,
        })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Exp(x))
    }

    /// Natural log; the input must be strictly positive to stay finite.
    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softplus(x))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.push(Op::Softmax(x, axis))
    }

    pub fn layer_norm(&mut self, input: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        self.push(Op::LayerNorm { input, gain, bias, eps })
    }

    pub fn reduce_sum(&mut self, x: NodeId, axis: Option<usize>) -> NodeId {
        self.push(Op::ReduceSum(x, axis))
    }

    pub fn reduce_mean(&mut self, x: NodeId, axis: Option<usize>) -> NodeId {
        self.push(Op::ReduceMean(x, axis))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(x, factor))
    }
}

/// Source of leaf tensors for evaluation.
pub trait LeafValues {
    fn leaf(&self, name: &str) -> Option<&Tensor>;
}

impl LeafValues for HashMap<String, Tensor> {
    fn leaf(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl LeafValues for BTreeMap<String, Tensor> {
    fn leaf(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl LeafValues for [(&str, &Tensor)] {
    fn leaf(&self, name: &str) -> Option<&Tensor> {
        self.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
    }
}

impl<const N: usize> LeafValues for [(&str, &Tensor); N] {
    fn leaf(&self, name: &str) -> Option<&Tensor> {
        self.as_slice().leaf(name)
    }
}

/// Looks leaves up in `front` first, then in `back`.
pub struct Layered<'a, A: ?Sized, B: ?Sized> {
    pub front: &'a A,
    pub back: &'a B,
}

impl<A: LeafValues + ?Sized, B: LeafValues + ?Sized> LeafValues for Layered<'_, A, B> {
    fn leaf(&self, name: &str) -> Option<&Tensor> {
        self.front.leaf(name).or_else(|| self.back.leaf(name))
    }
}

/// Forward values of every node, borrowed from the leaves where possible.
#[derive(Clone, Debug)]
pub struct Values<'a> {
    values: Vec<Cow<'a, Tensor>>,
}

impl Values<'_> {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
    match axis {
        None => vec![1],
        Some(a) => {
            let mut s = shape.to_vec();
            s[a] = 1;
            s
        }
    }
}

fn binary_shape(a: &Tensor, b: &Tensor) -> Option<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar() {
        Some(a.shape().to_vec())
    } else if a.is_scalar() {
        Some(b.shape().to_vec())
    } else {
        None
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = if a.shape() == b.shape() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else if b.is_scalar() {
        let y = b.item();
        a.data().iter().map(|&x| f(x, y)).collect()
    } else {
        let x = a.item();
        b.data().iter().map(|&y| f(x, y)).collect()
    };
    Tensor::new(shape, data).expect("broadcast shape")
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct RowStats {
    mean: f64,
    rstd: f64,
}

fn row_stats(row: &[f64], eps: f64) -> RowStats {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    RowStats {
        mean,
        rstd: 1.0 / (var + eps).sqrt(),
    }
}

fn forward_node<'a>(
    graph: &Graph,
    idx: usize,
    values: &[Cow<'a, Tensor>],
    leaves: &'a (impl LeafValues + ?Sized),
) -> Result<Cow<'a, Tensor>, GraphError> {
    let op = &graph.nodes[idx];
    let err = |detail: String| GraphError::Shape {
        node: idx,
        op: op.name(),
        detail,
    };
    let v = |id: NodeId| -> &Tensor { &values[id.0] };
    let out = match op {
        Op::Leaf { name, .. } => {
            return leaves
                .leaf(name)
                .map(Cow::Borrowed)
                .ok_or_else(|| GraphError::UnboundLeaf(name.clone()));
        }
        Op::Constant(t) => t.clone(),
        Op::Add(a, b) | Op::Mul(a, b) => {
            let (a, b) = (v(*a), v(*b));
            let shape = binary_shape(a, b)
                .ok_or_else(|| err(format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape())))?;
            if matches!(op, Op::Add(..)) {
                zip_broadcast(a, b, shape, |x, y| x + y)
            } else {
                zip_broadcast(a, b, shape, |x, y| x * y)
            }
        }
        Op::MatMul(a, b) => {
            let (a, b) = (v(*a), v(*b));
            let ((m, k), (k2, n)) = match (a.dims2(), b.dims2()) {
                (Some(x), Some(y)) => (x, y),
                _ => return Err(err(format!("needs matrices, got {:?} @ {:?}", a.shape(), b.shape()))),
            };
            if k != k2 {
                return Err(err(format!(
                    "inner dimensions differ: {:?} @ {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n)).unwrap()
        }
        Op::Transpose(x) => {
            let x = v(*x);
            if x.dims2().is_none() {
                return Err(err(format!("needs a matrix, got {:?}", x.shape())));
            }
            x.transpose2()
        }
        Op::Reshape(x, shape) => {
            let x = v(*x);
            x.reshaped(shape.clone())
                .map_err(|e| err(format!("cannot reshape {:?}: {e}", x.shape())))?
        }
        Op::Concat(xs, axis) => {
            let first = xs.first().ok_or_else(|| err("no operands".into()))?;
            let base = v(*first).shape().to_vec();
            if *axis >= base.len() {
                return Err(err(format!("axis {axis} out of range for {base:?}")));
            }
            let mut total = 0;
            for id in xs {
                let s = v(*id).shape();
                let compatible =
                    s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == *axis || x == y);
                if !compatible {
                    return Err(err(format!("operand {:?} incompatible with {:?}", s, base)));
                }
                total += s[*axis];
            }
            let mut shape = base.clone();
            shape[*axis] = total;
            let (outer, _, inner) = split_axis(&shape, *axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for id in xs {
                    let t = v(*id);
                    let chunk = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(shape, data).unwrap()
        }
        Op::Slice {
            input,
            axis,
            start,
            len,
        } => {
            let x = v(*input);
            if *axis >= x.rank() || *len == 0 || start + len > x.shape()[*axis] {
                return Err(err(format!(
                    "slice [{start}, {}) on axis {axis} invalid for {:?}",
                    start + len,
                    x.shape()
                )));
            }
            let (outer, n, inner) = split_axis(x.shape(), *axis);
            let mut shape = x.shape().to_vec();
            shape[*axis] = *len;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                data.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            Tensor::new(shape, data).unwrap()
        }
        Op::Exp(x) => v(*x).map(f64::exp),
        Op::Log(x) => v(*x).map(f64::ln),
        Op::Tanh(x) => v(*x).map(f64::tanh),
        Op::Relu(x) => v(*x).map(|z| if z > 0.0 { z } else { 0.0 }),
        Op::Softplus(x) => v(*x).map(softplus),
        Op::Softmax(x, axis) => {
            let x = v(*x);
            if *axis >= x.rank() {
                return Err(err(format!("axis {axis} out of range for {:?}", x.shape())));
            }
            let (outer, n, inner) = split_axis(x.shape(), *axis);
            let mut out = x.clone();
            let d = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let max = (0..n).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for k in 0..n {
                        let e = (d[at(k)] - max).exp();
                        d[at(k)] = e;
                        sum += e;
                    }
                    for k in 0..n {
                        d[at(k)] /= sum;
                    }
                }
            }
            out
        }
        Op::LayerNorm { input, gain, bias, eps } => {
            let (x, g, b) = (v(*input), v(*gain), v(*bias));
            let (rows, cols) = x
                .dims2()
                .ok_or_else(|| err(format!("needs a matrix, got {:?}", x.shape())))?;
            if g.numel() != cols || b.numel() != cols {
                return Err(err(format!(
                    "gain {:?} / bias {:?} must have {cols} entries",
                    g.shape(),
                    b.shape()
                )));
            }
            let mut out = x.clone();
            for r in 0..rows {
                let st = row_stats(x.row(r), *eps);
                let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
                for (c, val) in row.iter_mut().enumerate() {
                    *val = (*val - st.mean) * st.rstd * g.data()[c] + b.data()[c];
                }
            }
            out
        }
        Op::ReduceSum(x, axis) | Op::ReduceMean(x, axis) => {
            let x = v(*x);
            let mean = matches!(op, Op::ReduceMean(..));
            match axis {
                None => {
                    let s = x.sum();
                    Tensor::scalar(if mean { s / x.numel() as f64 } else { s })
                }
                Some(a) => {
                    if *a >= x.rank() {
                        return Err(err(format!("axis {a} out of range for {:?}", x.shape())));
                    }
                    let (outer, n, inner) = split_axis(x.shape(), *a);
                    let mut data = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                data[o * inner + i] += x.data()[(o * n + k) * inner + i];
                            }
                        }
                    }
                    if mean {
                        data.iter_mut().for_each(|d| *d /= n as f64);
                    }
                    Tensor::new(reduced_shape(x.shape(), Some(*a)), data).unwrap()
                }
            }
        }
        Op::Scale(x, c) => v(*x).map(|z| z * c),
    };
    Ok(Cow::Owned(out))
}

/// Computes every node of `graph` once, in construction order.
pub fn evaluate<'a, L: LeafValues + ?Sized>(graph: &Graph, leaves: &'a L) -> Result<Values<'a>, GraphError> {
    let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(graph.nodes.len());
    for idx in 0..graph.nodes.len() {
        let v = forward_node(graph, idx, &values, leaves)?;
        values.push(v);
    }
    Ok(Values { values })
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

/// Reduces a gradient to the shape of a (possibly broadcast scalar) operand.
fn unbroadcast(g: Tensor, operand: &Tensor) -> Tensor {
    if g.shape() == operand.shape() {
        g
    } else {
        Tensor::new(operand.shape().to_vec(), vec![g.sum()]).unwrap()
    }
}

fn backward_node(op: &Op, g: &Tensor, out: &Tensor, values: &Values<'_>, needs: &[bool], grads: &mut [Option<Tensor>]) {
    let v = |id: NodeId| values.get(id);
    let want = |id: NodeId| needs[id.0];
    match op {
        Op::Leaf { .. } | Op::Constant(_) => {}
        Op::Add(a, b) => {
            if want(*a) {
                accumulate(grads, *a, unbroadcast(g.clone(), v(*a)));
            }
            if want(*b) {
                accumulate(grads, *b, unbroadcast(g.clone(), v(*b)));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (v(*a), v(*b));
            if want(*a) {
                let ga = zip_broadcast(g, bv, g.shape().to_vec(), |x, y| x * y);
                accumulate(grads, *a, unbroadcast(ga, av));
            }
            if want(*b) {
                let gb = zip_broadcast(g, av, g.shape().to_vec(), |x, y| x * y);
                accumulate(grads, *b, unbroadcast(gb, bv));
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (v(*a), v(*b));
            let (m, k) = av.dims2().unwrap();
            let (_, n) = bv.dims2().unwrap();
            if want(*a) {
                let ga = matmul_nt(g.data(), bv.data(), m, n, k);
                accumulate(grads, *a, Tensor::new(vec![m, k], ga).unwrap());
            }
            if want(*b) {
                let gb = matmul_tn(av.data(), g.data(), m, k, n);
                accumulate(grads, *b, Tensor::new(vec![k, n], gb).unwrap());
            }
        }
        Op::Transpose(x) => {
            if want(*x) {
                accumulate(grads, *x, g.transpose2());
            }
        }
        Op::Reshape(x, _) => {
            if want(*x) {
                accumulate(grads, *x, g.reshaped(v(*x).shape().to_vec()).unwrap());
            }
        }
        Op::Concat(xs, axis) => {
            let (outer, _, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for id in xs {
                let t = v(*id);
                let chunk = t.shape()[*axis] * inner;
                if want(*id) {
                    let mut data = Vec::with_capacity(t.numel());
                    let row = out.shape()[*axis] * inner;
                    for o in 0..outer {
                        let base = o * row + offset;
                        data.extend_from_slice(&g.data()[base..base + chunk]);
                    }
                    accumulate(grads, *id, Tensor::new(t.shape().to_vec(), data).unwrap());
                }
                offset += chunk;
            }
        }
        Op::Slice {
            input,
            axis,
            start,
            len,
        } => {
            if want(*input) {
                let x = v(*input);
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let mut gx = Tensor::zeros(x.shape());
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    gx.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                accumulate(grads, *input, gx);
            }
        }
        Op::Exp(x) => {
            if want(*x) {
                accumulate(grads, *x, zip_broadcast(g, out, g.shape().to_vec(), |a, y| a * y));
            }
        }
        Op::Log(x) => {
            if want(*x) {
                accumulate(grads, *x, zip_broadcast(g, v(*x), g.shape().to_vec(), |a, z| a / z));
            }
        }
        Op::Tanh(x) => {
            if want(*x) {
                let gx = zip_broadcast(g, out, g.shape().to_vec(), |a, y| a * (1.0 - y * y));
                accumulate(grads, *x, gx);
            }
        }
        Op::Relu(x) => {
            if want(*x) {
                let gx = zip_broadcast(g, v(*x), g.shape().to_vec(), |a, z| if z > 0.0 { a } else { 0.0 });
                accumulate(grads, *x, gx);
            }
        }
        Op::Softplus(x) => {
            if want(*x) {
                let gx = zip_broadcast(g, v(*x), g.shape().to_vec(), |a, z| a * sigmoid(z));
                accumulate(grads, *x, gx);
            }
        }
        Op::Softmax(x, axis) => {
            if want(*x) {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let mut gx = Tensor::zeros(out.shape());
                let (y, gd) = (out.data(), g.data());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| gd[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            gx.data_mut()[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
        }
        Op::LayerNorm { input, gain, bias, eps } => {
            let (x, gn) = (v(*input), v(*gain));
            let (rows, cols) = x.dims2().unwrap();
            let mut gx = Tensor::zeros(x.shape());
            let mut ggain = vec![0.0; cols];
            let mut gbias = vec![0.0; cols];
            let mut xhat = vec![0.0; cols];
            let mut dxhat = vec![0.0; cols];
            for r in 0..rows {
                let xr = x.row(r);
                let gr = &g.data()[r * cols..(r + 1) * cols];
                let st = row_stats(xr, *eps);
                for c in 0..cols {
                    xhat[c] = (xr[c] - st.mean) * st.rstd;
                    dxhat[c] = gr[c] * gn.data()[c];
                    ggain[c] += gr[c] * xhat[c];
                    gbias[c] += gr[c];
                }
                let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                let dst = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    dst[c] = st.rstd * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                }
            }
            if want(*input) {
                accumulate(grads, *input, gx);
            }
            if want(*gain) {
                accumulate(grads, *gain, Tensor::new(gn.shape().to_vec(), ggain).unwrap());
            }
            if want(*bias) {
                let bshape = v(*bias).shape().to_vec();
                accumulate(grads, *bias, Tensor::new(bshape, gbias).unwrap());
            }
        }
        Op::ReduceSum(x, axis) | Op::ReduceMean(x, axis) => {
            if want(*x) {
                let xv = v(*x);
                let mean = matches!(op, Op::ReduceMean(..));
                let gx = match axis {
                    None => {
                        let s = if mean { g.item() / xv.numel() as f64 } else { g.item() };
                        Tensor::full(xv.shape(), s)
                    }
                    Some(a) => {
                        let (outer, n, inner) = split_axis(xv.shape(), *a);
                        let scale = if mean { 1.0 / n as f64 } else { 1.0 };
                        let mut gx = Tensor::zeros(xv.shape());
                        for o in 0..outer {
                            for k in 0..n {
                                for i in 0..inner {
                                    gx.data_mut()[(o * n + k) * inner + i] = g.data()[o * inner + i] * scale;
                                }
                            }
                        }
                        gx
                    }
                };
                accumulate(grads, *x, gx);
            }
        }
        Op::Scale(x, c) => {
            if want(*x) {
                accumulate(grads, *x, g.map(|a| a * c));
            }
        }
    }
}

/// Reverse-mode gradients of the scalar node `output` with respect to the
/// named leaves. A leaf that `output` does not depend on gets a zero tensor.
pub fn gradients(
    graph: &Graph,
    values: &Values<'_>,
    output: NodeId,
    wrt: &[&str],
) -> Result<BTreeMap<String, Tensor>, GraphError> {
    if values.len() != graph.len() {
        return Err(GraphError::StaleValues {
            expected: graph.len(),
            found: values.len(),
        });
    }
    let out_val = values.get(output);
    if !out_val.is_scalar() {
        return Err(GraphError::NonScalarOutput {
            node: output.0,
            shape: out_val.shape().to_vec(),
        });
    }
    let mut targets = HashSet::new();
    for name in wrt {
        let id = graph
            .leaf_id(name)
            .ok_or_else(|| GraphError::UnknownLeaf(name.to_string()))?;
        targets.insert(id.0);
    }

    // Only nodes with a path from a requested leaf need a gradient.
    let mut needs = vec![false; graph.len()];
    for (i, op) in graph.nodes.iter().enumerate().take(output.0 + 1) {
        needs[i] = targets.contains(&i) || op.operands().iter().any(|o| needs[o.0]);
    }

    let mut grads: Vec<Option<Tensor>> = vec![None; graph.len()];
    grads[output.0] = Some(Tensor::ones(out_val.shape()));
    for idx in (0..=output.0).rev() {
        if !needs[idx] {
            continue;
        }
        let Some(g) = grads[idx].take() else { continue };
        let op = &graph.nodes[idx];
        if matches!(op, Op::Leaf { .. }) {
            grads[idx] = Some(g);
            continue;
        }
        backward_node(op, &g, values.get(NodeId(idx)), values, &needs, &mut grads);
    }

    let mut result = BTreeMap::new();
    for name in wrt {
        let id = graph.leaf_id(name).unwrap();
        let g = grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(values.get(id).shape()));
        result.insert(name.to_string(), g);
    }
    Ok(result)
}

/// Gradient norms below this are treated as zero by [`finite_difference_check`].
pub const FD_NORM_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of `output` w.r.t. `leaf` against central
/// differences with step `epsilon`, returning the normwise relative error
/// `‖g_ad - g_fd‖ / max(‖g_ad‖, ‖g_fd‖, FD_NORM_FLOOR)`.
///
/// A per-coordinate ratio is useless here: coordinates whose true derivative
/// is ~1e-9 are dominated by rounding in the difference quotient.
pub fn finite_difference_check<L: LeafValues + ?Sized>(
    graph: &Graph,
    leaves: &L,
    output: NodeId,
    leaf: &str,
    epsilon: f64,
) -> Result<f64, GraphError> {
    let values = evaluate(graph, leaves)?;
    let ad = gradients(graph, &values, output, &[leaf])?.remove(leaf).unwrap();
    let base = values.get(graph.leaf_id(leaf).unwrap()).clone();
    drop(values);

    let (mut diff2, mut ad2, mut fd2) = (0.0, 0.0, 0.0);
    let mut probe = base.clone();
    for i in 0..base.numel() {
        let orig = base.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = eval_scalar(graph, leaves, output, leaf, &probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let minus = eval_scalar(graph, leaves, output, leaf, &probe)?;
        probe.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * epsilon);
        let g = ad.data()[i];
        diff2 += (g - fd) * (g - fd);
        ad2 += g * g;
        fd2 += fd * fd;
    }
    let scale = f64::max(ad2, fd2).sqrt().max(FD_NORM_FLOOR);
    Ok(diff2.sqrt() / scale)
}

fn eval_scalar<L: LeafValues + ?Sized>(
    graph: &Graph,
    leaves: &L,
    output: NodeId,
    leaf: &str,
    value: &Tensor,
) -> Result<f64, GraphError> {
    let front = [(leaf, value)];
    let layered = Layered {
        front: &front,
        back: leaves,
    };
    let values = evaluate(graph, &layered)?;
    Ok(values.get(output).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor)]) -> HashMap<String, Tensor> {
        pairs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    #[test]
    fn matmul_of_ones() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let c = g.matmul(a, b);
        let leaves = bind(&[("a", Tensor::ones(&[2, 3])), ("b", Tensor::ones(&[3, 1]))]);
        let vals = evaluate(&g, &leaves).unwrap();
        assert_eq!(vals.get(c), &Tensor::full(&[2, 1], 3.0));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.softmax(x, 0);
        let leaves = bind(&[("x", Tensor::zeros(&[3]))]);
        let vals = evaluate(&g, &leaves).unwrap();
        for &p in vals.get(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.softmax(x, 0);
        let leaves = bind(&[("x", Tensor::vector(vec![1000.0, 1000.0]))]);
        let vals = evaluate(&g, &leaves).unwrap();
        assert_eq!(vals.get(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softplus_composite_at_one() {
        // log(1 + exp(1)) = 1.3132616875182228
        let mut g = Graph::new();
        let x = g.input("x");
        let e = g.exp(x);
        let one = g.constant(Tensor::scalar(1.0));
        let s = g.add(one, e);
        let l = g.log(s);
        let leaves = bind(&[("x", Tensor::scalar(1.0))]);
        let vals = evaluate(&g, &leaves).unwrap();
        assert!((vals.get(l).item() - 1.313_261_687_518_222_8).abs() < 1e-15);
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.input("x");
        let sq = g.mul(x, x);
        let s = g.reduce_sum(sq, None);
        let leaves = bind(&[("x", Tensor::vector(vec![1.0, 2.0, 3.0]))]);
        let vals = evaluate(&g, &leaves).unwrap();
        let grads = gradients(&g, &vals, s, &["x"]).unwrap();
        assert_eq!(grads["x"].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn softmax_pick_first_gradient() {
        // d softmax_0 / dx at [0,0] = [p0(1-p0), -p0 p1] = [0.25, -0.25]
        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.softmax(x, 0);
        let first = g.slice(s, 0, 0, 1);
        let leaves = bind(&[("x", Tensor::zeros(&[2]))]);
        let vals = evaluate(&g, &leaves).unwrap();
        let grads = gradients(&g, &vals, first, &["x"]).unwrap();
        assert!((grads["x"].data()[0] - 0.25).abs() < 1e-15);
        assert!((grads["x"].data()[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input("x");
        let _y = g.input("y");
        let s = g.reduce_sum(x, None);
        let leaves = bind(&[("x", Tensor::ones(&[2])), ("y", Tensor::ones(&[2, 2]))]);
        let vals = evaluate(&g, &leaves).unwrap();
        let grads = gradients(&g, &vals, s, &["y"]).unwrap();
        assert_eq!(grads["y"], Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let c = g.matmul(a, b);
        let leaves = bind(&[("a", Tensor::ones(&[2, 3])), ("b", Tensor::ones(&[2, 1]))]);
        match evaluate(&g, &leaves) {
            Err(GraphError::Shape { node, op, .. }) => {
                assert_eq!(node, c.index());
                assert_eq!(op, "matmul");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn unbound_leaf_is_reported() {
        let mut g = Graph::new();
        g.input("missing");
        let leaves = bind(&[]);
        assert_eq!(
            evaluate(&g, &leaves).unwrap_err(),
            GraphError::UnboundLeaf("missing".into())
        );
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.scale(x, 2.0);
        let leaves = bind(&[("x", Tensor::ones(&[2]))]);
        let vals = evaluate(&g, &leaves).unwrap();
        assert!(matches!(
            gradients(&g, &vals, y, &["x"]),
            Err(GraphError::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn fd_check_on_quadratic_and_constant() {
        let mut g = Graph::new();
        let x = g.input("x");
        let sq = g.mul(x, x);
        let q = g.reduce_sum(sq, None);
        let leaves = bind(&[("x", Tensor::vector(vec![0.3, -1.2, 2.5]))]);
        let err = finite_difference_check(&g, &leaves, q, "x", 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");

        let mut g = Graph::new();
        let _x = g.input("x");
        let c = g.constant(Tensor::scalar(4.0));
        let err = finite_difference_check(&g, &leaves, c, "x", 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn evaluation_is_bitwise_deterministic() {
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.parameter("w");
        let h = g.matmul(x, w);
        let t = g.tanh(h);
        let s = g.softmax(t, 1);
        let leaves = bind(&[
            ("x", Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin())),
            ("w", Tensor::from_fn(&[4, 5], |i| (i as f64 * 0.11).cos())),
        ]);
        let a = evaluate(&g, &leaves).unwrap().get(s).clone();
        let b = evaluate(&g, &leaves).unwrap().get(s).clone();
        assert_eq!(a, b);
    }
}
