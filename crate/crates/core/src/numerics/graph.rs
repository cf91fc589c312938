//! A small eager reverse-mode autodiff tape.
//!
//! Nodes are appended in evaluation order, so parents always precede their
//! children and the backward sweep is a single reverse pass. The op set is
//! deliberately closed: matmul, add, tanh, mul, scale, sum, mean, square,
//! log-sigmoid, sigmoid and clip. Anything else (subtraction, row selection,
//! per-row scaling) is composed from these.

use crate::error::{Error, Result};
use crate::numerics::array::{gemm, DenseArray, Layout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is a row vector repeated over every row of lhs.
    Row,
    /// rhs is a column vector repeated over every column of lhs.
    Col,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId, Broadcast),
    Tanh(NodeId),
    Mul(NodeId, NodeId, Broadcast),
    Scale(NodeId, f64),
    Sum(NodeId, Option<usize>),
    Mean(NodeId),
    Square(NodeId),
    LogSigmoid(NodeId),
    Sigmoid(NodeId),
    Clip(NodeId, f64, f64),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: DenseArray,
    tracked: bool,
}

/// Computation graph over [`DenseArray`] values.
///
/// Values are computed when a node is added; [`CompGraph::backward`] returns
/// gradients for every tracked node reachable from the loss.
#[derive(Clone, Debug, Default)]
pub struct CompGraph {
    nodes: Vec<Node>,
}

/// Per-node gradient accumulators produced by a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&DenseArray> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<DenseArray> {
        self.grads.get_mut(id.0).and_then(Option::take)
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

/// `ln σ(x)` without overflow for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

impl CompGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, value: DenseArray) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf treated as a constant.
    pub fn input(&mut self, value: DenseArray) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &DenseArray {
        &self.nodes[id.0].value
    }

    pub fn is_tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn push(&mut self, op: Op, value: DenseArray, tracked: bool) -> NodeId {
        self.nodes.push(Node { op, value, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Shape(format!("node {} is not in this graph", id.0)));
        }
        Ok(())
    }

    fn tracked(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tracked)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).matmul(self.value(b))?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, tracked))
    }

    fn broadcast_kind(lhs: &DenseArray, rhs: &DenseArray) -> Result<Broadcast> {
        if lhs.shape() == rhs.shape() {
            return Ok(Broadcast::Same);
        }
        if lhs.rank() == 2 {
            let (n, m) = (lhs.shape()[0], lhs.shape()[1]);
            match rhs.shape() {
                [len] if *len == m => return Ok(Broadcast::Row),
                [1, len] if *len == m => return Ok(Broadcast::Row),
                [len, 1] if *len == n => return Ok(Broadcast::Col),
                _ => {}
            }
        }
        Err(Error::Shape(format!(
            "cannot broadcast {:?} against {:?}",
            rhs.shape(),
            lhs.shape()
        )))
    }

    fn binary(
        lhs: &DenseArray,
        rhs: &DenseArray,
        kind: Broadcast,
        f: impl Fn(f64, f64) -> f64,
    ) -> DenseArray {
        let mut out = lhs.clone();
        let cols = lhs.cols();
        let r = rhs.data();
        match kind {
            Broadcast::Same => {
                for (o, &b) in out.data_mut().iter_mut().zip(r) {
                    *o = f(*o, b);
                }
            }
            Broadcast::Row => {
                for row in out.data_mut().chunks_mut(cols) {
                    for (o, &b) in row.iter_mut().zip(r) {
                        *o = f(*o, b);
                    }
                }
            }
            Broadcast::Col => {
                for (row, &b) in out.data_mut().chunks_mut(cols).zip(r) {
                    for o in row.iter_mut() {
                        *o = f(*o, b);
                    }
                }
            }
        }
        out
    }

    /// Elementwise sum; `b` may be a row or column vector broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let kind = Self::broadcast_kind(self.value(a), self.value(b))?;
        let value = Self::binary(self.value(a), self.value(b), kind, |x, y| x + y);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Op::Add(a, b, kind), value, tracked))
    }

    /// Elementwise product; `b` may be a row or column vector broadcast over `a`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let kind = Self::broadcast_kind(self.value(a), self.value(b))?;
        let value = Self::binary(self.value(a), self.value(b), kind, |x, y| x * y);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Op::Mul(a, b, kind), value, tracked))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::LogSigmoid(a), log_sigmoid)
    }

    pub fn clip(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(Error::Argument(format!("clip bounds {lo} > {hi}")));
        }
        self.unary(a, Op::Clip(a, lo, hi), |x| x.clamp(lo, hi))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        self.check(a)?;
        let value = self.value(a).map(f);
        let tracked = self.tracked(&[a]);
        Ok(self.push(op, value, tracked))
    }

    /// Sum over all entries (`None`, giving shape `[1]`) or along one axis of a
    /// rank-2 array, keeping that axis with length 1.
    pub fn sum(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a);
        let value = match axis {
            None => DenseArray::scalar(v.sum()),
            Some(ax) => {
                if v.rank() != 2 || ax > 1 {
                    return Err(Error::Shape(format!(
                        "sum over axis {ax} of {:?}",
                        v.shape()
                    )));
                }
                let (n, m) = (v.shape()[0], v.shape()[1]);
                if ax == 0 {
                    let mut out = vec![0.0; m];
                    for row in v.data().chunks(m) {
                        for (o, x) in out.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    DenseArray::new(vec![1, m], out)?
                } else {
                    let out = v.data().chunks(m).map(|r| r.iter().sum()).collect();
                    DenseArray::new(vec![n, 1], out)?
                }
            }
        };
        let tracked = self.tracked(&[a]);
        Ok(self.push(Op::Sum(a, axis), value, tracked))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let value = DenseArray::scalar(self.value(a).mean());
        let tracked = self.tracked(&[a]);
        Ok(self.push(Op::Mean(a), value, tracked))
    }

    /// `a - b`, composed from `scale` and `add`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(DenseArray::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            debug_assert_eq!(g.shape(), node.value.shape());
            match node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = self.value(a);
                    let bv = self.value(b);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if self.is_tracked(a) {
                        // dA = dC · Bᵀ
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), Layout::Normal, bv.data(), Layout::Transposed, &mut da, 0.0);
                        accumulate(&mut grads, a, DenseArray::new(vec![m, k], da)?);
                    }
                    if self.is_tracked(b) {
                        // dB = Aᵀ · dC
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), Layout::Transposed, g.data(), Layout::Normal, &mut db, 0.0);
                        accumulate(&mut grads, b, DenseArray::new(vec![k, n], db)?);
                    }
                }
                Op::Add(a, b, kind) => {
                    if self.is_tracked(b) {
                        accumulate(&mut grads, b, reduce_broadcast(&g, self.value(b), kind)?);
                    }
                    if self.is_tracked(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                }
                Op::Mul(a, b, kind) => {
                    let av = self.value(a);
                    let bv = self.value(b);
                    if self.is_tracked(b) {
                        let prod = g.zip_map(av, |x, y| x * y)?;
                        accumulate(&mut grads, b, reduce_broadcast(&prod, bv, kind)?);
                    }
                    if self.is_tracked(a) {
                        accumulate(&mut grads, a, Self::binary(&g, bv, kind, |x, y| x * y));
                    }
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))?;
                    accumulate(&mut grads, a, d);
                }
                Op::Scale(a, k) => accumulate(&mut grads, a, g.scale(k)),
                Op::Square(a) => {
                    let d = g.zip_map(self.value(a), |gi, x| 2.0 * gi * x)?;
                    accumulate(&mut grads, a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |gi, s| gi * s * (1.0 - s))?;
                    accumulate(&mut grads, a, d);
                }
                Op::LogSigmoid(a) => {
                    let d = g.zip_map(self.value(a), |gi, x| gi * sigmoid(-x))?;
                    accumulate(&mut grads, a, d);
                }
                Op::Clip(a, lo, hi) => {
                    let d = g.zip_map(self.value(a), |gi, x| {
                        if x > lo && x < hi {
                            gi
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads, a, d);
                }
                Op::Sum(a, axis) => {
                    let av = self.value(a);
                    let d = match axis {
                        None => DenseArray::full(av.shape(), g.item()),
                        Some(0) => Self::binary(&DenseArray::zeros(av.shape()), &g, Broadcast::Row, |_, y| y),
                        Some(_) => Self::binary(&DenseArray::zeros(av.shape()), &g, Broadcast::Col, |_, y| y),
                    };
                    accumulate(&mut grads, a, d);
                }
                Op::Mean(a) => {
                    let av = self.value(a);
                    accumulate(&mut grads, a, DenseArray::full(av.shape(), g.item() / av.len() as f64));
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<DenseArray>], id: NodeId, delta: DenseArray) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn reduce_broadcast(g: &DenseArray, target: &DenseArray, kind: Broadcast) -> Result<DenseArray> {
    match kind {
        Broadcast::Same => Ok(g.clone()),
        Broadcast::Row => {
            let m = g.cols();
            let mut out = vec![0.0; m];
            for row in g.data().chunks(m) {
                for (o, x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
            DenseArray::new(target.shape().to_vec(), out)
        }
        Broadcast::Col => {
            let m = g.cols();
            let out = g.data().chunks(m).map(|r| r.iter().sum()).collect();
            DenseArray::new(target.shape().to_vec(), out)
        }
    }
}
