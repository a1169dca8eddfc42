//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes one node whose
//! inputs are earlier nodes, so insertion order is a topological order and
//! [`Graph::backward`] is a single reverse sweep. Graphs are meant to be
//! rebuilt for every forward pass.
//!
//! Broadcasting is limited to scalar-with-tensor and row-vector-over-matrix
//! for the binary elementwise ops.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Arguments of `log` are clamped to at least this value.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Log,
    Exp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
    /// rhs is a row vector repeated over the rows of lhs.
    RhsRow(usize),
}

impl Broadcast {
    #[inline]
    fn indices(self, k: usize) -> (usize, usize) {
        match self {
            Broadcast::Same => (k, k),
            Broadcast::LhsScalar => (0, k),
            Broadcast::RhsScalar => (k, 0),
            Broadcast::RhsRow(n) => (k, k % n),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Binary(BinaryOp, NodeId, NodeId, Broadcast),
    Unary(UnaryOp, NodeId),
    Scale(NodeId, f64),
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    SoftmaxRows(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: NodeId,
        targets: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// Adds a leaf; gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let rg = t.requires_grad();
        self.push(Op::Leaf, t.clone(), rg)
    }

    pub fn param(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.clone(), true)
    }

    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.clone(), false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
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

    /// Gradient of the last `backward` loss with respect to `id`. `None` for
    /// nodes that do not require gradients.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        self.grads[id.0].as_deref()
    }

    /// Returns a copy of the node's value carrying its gradient.
    pub fn tensor_with_grad(&self, id: NodeId) -> Tensor {
        let mut t = self.nodes[id.0].value.clone();
        // lengths agree by construction
        let _ = t.set_grad(self.grad(id).map(|g| g.to_vec()));
        t.with_requires_grad(self.nodes[id.0].requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    fn broadcast(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(Broadcast, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        if sa == sb {
            Ok((Broadcast::Same, sa.to_vec()))
        } else if nb == 1 {
            Ok((Broadcast::RhsScalar, sa.to_vec()))
        } else if na == 1 {
            Ok((Broadcast::LhsScalar, sb.to_vec()))
        } else if sa.len() == 2 && sa[1] == nb && (sb.len() == 1 || (sb.len() == 2 && sb[0] == 1)) {
            Ok((Broadcast::RhsRow(nb), sa.to_vec()))
        } else {
            Err(Error::dim(op, sa, sb))
        }
    }

    pub fn binary(&mut self, op: BinaryOp, a: NodeId, b: NodeId) -> Result<NodeId> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        };
        let (bc, shape) = self.broadcast(name, a, b)?;
        let n: usize = shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = (0..n)
            .map(|k| {
                let (i, j) = bc.indices(k);
                match op {
                    BinaryOp::Add => da[i] + db[j],
                    BinaryOp::Sub => da[i] - db[j],
                    BinaryOp::Mul => da[i] * db[j],
                }
            })
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Binary(op, a, b, bc), value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: NodeId) -> NodeId {
        let src = self.value(a);
        let out: Vec<f64> = src
            .data()
            .iter()
            .map(|&x| match op {
                UnaryOp::Relu => x.max(0.0),
                UnaryOp::Sigmoid => sigmoid(x),
                UnaryOp::Log => x.max(LOG_EPS).ln(),
                UnaryOp::Exp => x.exp(),
            })
            .collect();
        let value = Tensor::new(src.shape().to_vec(), out).expect("shape preserved");
        let rg = self.requires_grad(a);
        self.push(Op::Unary(op, a), value, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Log, a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let src = self.value(a);
        let out = src.data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(src.shape().to_vec(), out).expect("shape preserved");
        let rg = self.requires_grad(a);
        self.push(Op::Scale(a, c), value, rg)
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let src = self.value(a);
        let out = src.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let value = Tensor::new(src.shape().to_vec(), out).expect("shape preserved");
        let rg = self.requires_grad(a);
        self.push(Op::Clamp(a, lo, hi), value, rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let rg = self.requires_grad(a);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let src = self.value(a);
        if src.shape().len() != 2 {
            return Err(Error::dim("softmax_rows", src.shape(), &[0, 0]));
        }
        let (b, c) = (src.rows(), src.cols());
        let mut out = vec![0.0; b * c];
        for r in 0..b {
            softmax_into(src.row(r), &mut out[r * c..(r + 1) * c]);
        }
        let value = Tensor::new(vec![b, c], out)?;
        let rg = self.requires_grad(a);
        Ok(self.push(Op::SoftmaxRows(a), value, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let src = self.value(logits);
        if src.shape().len() != 2 || src.rows() != labels.len() {
            return Err(Error::dim("softmax_cross_entropy", src.shape(), &[labels.len()]));
        }
        let (b, c) = (src.rows(), src.cols());
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Index {
                    what: "class labels",
                    index: y,
                    bound: c,
                });
            }
            let row = src.row(r);
            softmax_into(row, &mut probs[r * c..(r + 1) * c]);
            total += nll_row(row, y);
        }
        let rg = self.requires_grad(logits);
        let value = Tensor::scalar(total / b as f64);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
            rg,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let src = self.value(logits);
        if src.len() != targets.len() {
            return Err(Error::dim("bce_with_logits", src.shape(), &[targets.len()]));
        }
        let total: f64 = src
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / targets.len() as f64);
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// Populates gradients of every node that requires them with respect to
    /// the scalar `loss`. Previous gradients are discarded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout);
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, gout: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |id: NodeId| nodes[id.0].value.data();
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[id.0].requires_grad {
                return;
            }
            let n = nodes[id.0].value.len();
            f(grads[id.0].get_or_insert_with(|| vec![0.0; n]));
        };
        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                let (ad, bd) = (val(a), val(b));
                // dA = dC · Bᵀ
                acc(a, &mut |ga| {
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ · dC
                acc(b, &mut |gb| {
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, &g) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * g;
                            }
                        }
                    }
                });
            }
            &Op::Binary(op, a, b, bc) => {
                let (ad, bd) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for (k, &g) in gout.iter().enumerate() {
                        let (i, j) = bc.indices(k);
                        ga[i] += match op {
                            BinaryOp::Add | BinaryOp::Sub => g,
                            BinaryOp::Mul => g * bd[j],
                        };
                    }
                });
                acc(b, &mut |gb| {
                    for (k, &g) in gout.iter().enumerate() {
                        let (i, j) = bc.indices(k);
                        gb[j] += match op {
                            BinaryOp::Add => g,
                            BinaryOp::Sub => -g,
                            BinaryOp::Mul => g * ad[i],
                        };
                    }
                });
            }
            &Op::Unary(op, a) => {
                let (x, y) = (val(a), nodes[idx].value.data());
                acc(a, &mut |ga| {
                    for k in 0..gout.len() {
                        let d = match op {
                            UnaryOp::Relu => {
                                if x[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Sigmoid => y[k] * (1.0 - y[k]),
                            UnaryOp::Log => {
                                if x[k] >= LOG_EPS {
                                    1.0 / x[k]
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Exp => y[k],
                        };
                        ga[k] += gout[k] * d;
                    }
                });
            }
            &Op::Scale(a, c) => {
                acc(a, &mut |ga| {
                    for (g, &o) in ga.iter_mut().zip(gout) {
                        *g += o * c;
                    }
                });
            }
            &Op::Clamp(a, lo, hi) => {
                let x = val(a);
                acc(a, &mut |ga| {
                    for k in 0..gout.len() {
                        if x[k] >= lo && x[k] <= hi {
                            ga[k] += gout[k];
                        }
                    }
                });
            }
            &Op::Sum(a) => {
                let g0 = gout[0];
                acc(a, &mut |ga| ga.iter_mut().for_each(|g| *g += g0));
            }
            &Op::SoftmaxRows(a) => {
                let y = nodes[idx].value.data();
                let c = nodes[idx].value.cols();
                acc(a, &mut |ga| {
                    for r in 0..y.len() / c {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &gout[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = gout[0] / b as f64;
                acc(*logits, &mut |ga| {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let t = if j == y { 1.0 } else { 0.0 };
                            ga[r * c + j] += scale * (probs[r * c + j] - t);
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let z = val(*logits);
                let scale = gout[0] / targets.len() as f64;
                acc(*logits, &mut |ga| {
                    for k in 0..z.len() {
                        ga[k] += scale * (sigmoid(z[k]) - targets[k]);
                    }
                });
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = (z - max).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// `-log softmax(row)[label]`, computed as `(max - z_label) + ln(1 + rest)`
/// where `rest` sums the non-maximal exponentials, so confident rows keep
/// full relative precision.
fn nll_row(row: &[f64], label: usize) -> f64 {
    let (arg, max) = row
        .iter()
        .cloned()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, z)| if z > acc.1 { (i, z) } else { acc });
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &z)| (z - max).exp())
        .sum();
    (max - row[label]) + rest.ln_1p()
}
