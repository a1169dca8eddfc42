//! Continual-learning metrics and post-training probes.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{accuracy_from_scores, eval_loss, flat_params, set_flat_params, Model};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng;
use crate::stream::Batch;
use crate::tensor::Tensor;

/// `a[t][i]`: accuracy on task `i` after training through task `t`
/// (zero-based). Entries above the diagonal are the forthcoming-task
/// accuracies used by forward transfer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub a: Vec<Vec<Option<f64>>>,
    /// Accuracy of each task learned alone from a fresh initialization.
    pub baseline: Option<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix {
            a: vec![vec![None; tasks]; tasks],
            baseline: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], baseline: Option<Vec<f64>>) -> Self {
        AccuracyMatrix {
            a: rows.iter().map(|r| r.iter().copied().map(Some).collect()).collect(),
            baseline,
        }
    }

    pub fn tasks(&self) -> usize {
        self.a.len()
    }

    pub fn set(&mut self, after: usize, task: usize, acc: f64) -> Result<()> {
        let t = self.tasks();
        let cell = self
            .a
            .get_mut(after)
            .and_then(|r| r.get_mut(task))
            .ok_or(Error::Index {
                what: "accuracy matrix",
                index: after.max(task),
                bound: t,
            })?;
        *cell = Some(acc);
        Ok(())
    }

    fn get(&self, after: usize, task: usize) -> Result<f64> {
        self.a
            .get(after)
            .and_then(|r| r.get(task))
            .copied()
            .flatten()
            .ok_or_else(|| Error::Contract(format!("accuracy after task {after} on task {task} is missing")))
    }

    /// Mean accuracy over tasks `0..=after` measured right after `after`.
    pub fn seen_average(&self, after: usize) -> Result<f64> {
        let s: f64 = (0..=after).map(|i| self.get(after, i)).sum::<Result<f64>>()?;
        Ok(s / (after + 1) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub aac: f64,
    pub bwt: f64,
    /// Absent when no from-scratch baseline was measured.
    pub fwt: Option<f64>,
}

#[allow(clippy::needless_range_loop)]
pub fn acc_metrics(m: &AccuracyMatrix) -> Result<Metrics> {
    let t = m.tasks();
    if t < 2 || m.a.iter().any(|r| r.len() != t) {
        return Err(Error::Contract(format!("need a square matrix over at least 2 tasks, got {t}")));
    }
    let last = t - 1;
    let mut aac = 0.0;
    for i in 0..t {
        aac += m.get(last, i)?;
    }
    let mut bwt = 0.0;
    for i in 0..last {
        bwt += m.get(last, i)? - m.get(i, i)?;
    }
    let fwt = match &m.baseline {
        None => None,
        Some(b) => {
            if b.len() != t {
                return Err(Error::dim("baseline", &[t], &[b.len()]));
            }
            let mut s = 0.0;
            for i in 1..t {
                s += m.get(i - 1, i)? - b[i];
            }
            Some(s / last as f64)
        }
    };
    Ok(Metrics {
        aac: aac / t as f64,
        bwt: bwt / last as f64,
        fwt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HdivConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub train_fraction: f64,
}

impl Default for HdivConfig {
    fn default() -> Self {
        HdivConfig {
            epochs: 10,
            batch_size: 64,
            lr: 1e-2,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceProbeResult {
    /// Held-out binary cross-entropy of the discriminator, in nats.
    pub test_loss: f64,
    pub test_error: f64,
    /// `2 (1 - 2 err)` clipped to `[0, 2]`.
    pub divergence: f64,
}

/// Trains a linear discriminator between two feature sets and reports its
/// held-out loss and the implied divergence. Sets are truncated to equal
/// size so the problem is balanced.
pub fn hdiv_probe(a: &Tensor, b: &Tensor, seed: u64, cfg: &HdivConfig) -> Result<DivergenceProbeResult> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::dim("hdiv_probe", a.shape(), b.shape()));
    }
    let n = a.rows().min(b.rows());
    let n_train = ((n as f64) * cfg.train_fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::Contract(format!("cannot split {n} samples per set for the discriminator")));
    }
    let d = a.cols();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::rng(seed, &[rng::TAG_SPLIT]));
    let (tr, te) = perm.split_at(n_train);

    // Both sets share the split permutation, so identical inputs produce
    // identical positive and negative rows.
    let rows = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut x = Vec::with_capacity(2 * idx.len());
        let mut y = Vec::with_capacity(2 * idx.len());
        for &i in idx {
            x.push(a.row(i).to_vec());
            y.push(1.0);
            x.push(b.row(i).to_vec());
            y.push(0.0);
        }
        (x, y)
    };
    let (mut xtr, ytr) = rows(tr);
    let (mut xte, yte) = rows(te);

    // Standardize with training statistics.
    let m = xtr.len() as f64;
    for j in 0..d {
        let mean = xtr.iter().map(|r| r[j]).sum::<f64>() / m;
        let var = xtr.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / m;
        let sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
        for r in xtr.iter_mut().chain(xte.iter_mut()) {
            r[j] = (r[j] - mean) / sd;
        }
    }

    let mut w = Tensor::zeros(&[d, 1]);
    let mut bias = Tensor::zeros(&[1]);
    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.lr), &[d, 1]);
    let mut order: Vec<usize> = (0..xtr.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::rng(seed, &[rng::TAG_PROBE, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let xb: Vec<Vec<f64>> = chunk.iter().map(|&i| xtr[i].clone()).collect();
            let yb: Vec<f64> = chunk.iter().map(|&i| ytr[i]).collect();
            let mut g = Graph::new();
            let wi = g.param(&w);
            let bi = g.param(&bias);
            let xi = g.constant_owned(Tensor::from_rows(&xb)?);
            let z = g.matmul(xi, wi)?;
            let z = g.add(z, bi)?;
            let loss = g.bce_with_logits(z, &yb)?;
            g.backward(loss)?;
            let gw = g.grad(wi).map(<[f64]>::to_vec);
            let gb = g.grad(bi).map(<[f64]>::to_vec);
            opt.step(&mut [w.data_mut(), bias.data_mut()], &[gw.as_deref(), gb.as_deref()])?;
        }
    }

    let mut loss = 0.0;
    let mut wrong = 0usize;
    for (x, &y) in xte.iter().zip(&yte) {
        let z: f64 = x.iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>() + bias.data()[0];
        // Stable BCE with logits.
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        let pred = if z > 0.0 { 1.0 } else { 0.0 };
        if pred != y {
            wrong += 1;
        }
    }
    let n_te = yte.len() as f64;
    let err = wrong as f64 / n_te;
    Ok(DivergenceProbeResult {
        test_loss: loss / n_te,
        test_error: err,
        divergence: (2.0 * (1.0 - 2.0 * err)).clamp(0.0, 2.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessResult {
    pub radii: Vec<f64>,
    /// Unperturbed loss.
    pub base_loss: f64,
    /// `curves[direction][radius]`.
    pub curves: Vec<Vec<f64>>,
    /// Pointwise maximum of the curves over directions.
    pub envelope: Vec<f64>,
}

pub const DEFAULT_DIRECTIONS: usize = 10;

/// Evaluation loss along random unit-norm directions in parameter space,
/// averaged over `eval` (pairs of task index and data). The model is
/// never modified; perturbations are applied to a copy.
pub fn flatness_probe<M: Model + Clone>(
    model: &M,
    eval: &[(usize, Batch)],
    directions: usize,
    radii: &[f64],
    seed: u64,
) -> Result<FlatnessResult> {
    if eval.is_empty() || directions == 0 || radii.is_empty() {
        return Err(Error::Contract("flatness probe needs data, directions and radii".into()));
    }
    if radii.windows(2).any(|w| w[0] > w[1]) || radii.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::Contract(format!("radii must be ascending and nonnegative, got {radii:?}")));
    }
    let loss_of = |m: &M| -> Result<f64> {
        let mut s = 0.0;
        for (task, b) in eval {
            s += eval_loss(m, &b.x, &b.y, *task)?;
        }
        Ok(s / eval.len() as f64)
    };
    let base_loss = loss_of(model)?;
    let theta = flat_params(model);
    let mut probe = model.clone();
    let mut curves = Vec::with_capacity(directions);
    for dir in 0..directions {
        let mut r = rng::rng(seed, &[rng::TAG_PROBE, dir as u64]);
        let mut d: Vec<f64> = (0..theta.len()).map(|_| StandardNormal.sample(&mut r)).collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.iter_mut().for_each(|v| *v /= norm);
        let mut curve = Vec::with_capacity(radii.len());
        for &radius in radii {
            if radius == 0.0 {
                curve.push(base_loss);
                continue;
            }
            let moved: Vec<f64> = theta.iter().zip(&d).map(|(t, v)| t + radius * v).collect();
            set_flat_params(&mut probe, &moved)?;
            curve.push(loss_of(&probe)?);
        }
        curves.push(curve);
    }
    let envelope = (0..radii.len())
        .map(|j| curves.iter().map(|c| c[j]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(FlatnessResult {
        radii: radii.to_vec(),
        base_loss,
        curves,
        envelope,
    })
}

/// `out[i][t]`: accuracy of learner `i` alone on task `t` (its gated
/// feature through the task head) minus the mean over learners.
pub fn diversity_matrix(model: &EnsembleModel, eval: &[(usize, Batch)]) -> Result<Vec<Vec<f64>>> {
    let k = model.k();
    let mut out = vec![vec![0.0; eval.len()]; k];
    for (col, (task, b)) in eval.iter().enumerate() {
        let probs = model.per_learner_probs_eval(&b.x, *task)?;
        let accs: Vec<f64> = probs.iter().map(|p| accuracy_from_scores(p, &b.y)).collect();
        let mean = accs.iter().sum::<f64>() / k as f64;
        for (i, a) in accs.iter().enumerate() {
            out[i][col] = a - mean;
        }
    }
    Ok(out)
}
