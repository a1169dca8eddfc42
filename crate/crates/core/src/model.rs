//! The parameterized-model abstraction shared by training, consolidation and
//! the probes.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::learner::Phase;
use crate::tensor::Tensor;

/// A task-conditioned classifier whose parameters can be bound into a
/// [`Graph`].
///
/// `bind` must create one leaf per tensor of `parameters()`, and
/// `bound_ids` must list them in that same order.
pub trait Model {
    type Bound;

    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;
    fn bind(&self, g: &mut Graph) -> Self::Bound;
    fn bound_ids(bound: &Self::Bound) -> Vec<NodeId>;

    /// Logits `[B, C_task]` for a batch `x: [B, in]`.
    fn logits(
        &self,
        g: &mut Graph,
        bound: &Self::Bound,
        x: NodeId,
        task: usize,
        phase: Phase,
    ) -> Result<NodeId>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }
}

pub fn flat_params<M: Model + ?Sized>(m: &M) -> Vec<f64> {
    m.parameters()
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect()
}

pub fn set_flat_params<M: Model + ?Sized>(m: &mut M, flat: &[f64]) -> Result<()> {
    let total = m.parameter_count();
    if flat.len() != total {
        return Err(Error::dim("set_flat_params", &[total], &[flat.len()]));
    }
    let mut off = 0;
    for t in m.parameters_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    Ok(())
}

/// Concatenates the gradients of `ids` into one flat vector, using zeros
/// where a parameter received no gradient.
pub fn flat_grads(g: &Graph, ids: &[NodeId]) -> Vec<f64> {
    let mut out = Vec::new();
    for &id in ids {
        match g.grad(id) {
            Some(d) => out.extend_from_slice(d),
            None => out.extend(std::iter::repeat_n(0.0, g.value(id).len())),
        }
    }
    out
}

/// Evaluation-mode logits as a plain tensor.
pub fn eval_logits<M: Model + ?Sized>(m: &M, x: &Tensor, task: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = m.bind(&mut g);
    let xi = g.constant(x);
    let z = m.logits(&mut g, &b, xi, task, Phase::Eval)?;
    Ok(g.value(z).clone())
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy_from_scores(scores: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(scores.row(r)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Index of the first maximal entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy in evaluation mode.
pub fn eval_loss<M: Model + ?Sized>(m: &M, x: &Tensor, labels: &[usize], task: usize) -> Result<f64> {
    let mut g = Graph::new();
    let b = m.bind(&mut g);
    let xi = g.constant(x);
    let z = m.logits(&mut g, &b, xi, task, Phase::Eval)?;
    let l = g.softmax_cross_entropy(z, labels)?;
    Ok(g.value(l).data()[0])
}
