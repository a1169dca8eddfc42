//! Shared helpers for the integration targets: finite-difference gradient
//! checks, brute-force metric formulas and the acceptance experiment.
#![allow(dead_code)]

use std::path::Path;

use coscl::config::ExperimentConfig;
use coscl::diagnostics::AccuracyMatrix;
use coscl::learner::Phase;
use coscl::model::{flat_grads, flat_params, set_flat_params, Model};
use coscl::{Graph, NodeId, Result, Tensor};

pub const FD_STEP: f64 = 1e-6;

/// `||a - n|| / max(||a||, ||n||)`, the relative error used by every check.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Reduces any node to a scalar by a fixed random weighting, so that every
/// output element contributes to the checked gradient.
fn reduce(g: &mut Graph, out: NodeId, weights: &Tensor) -> Result<NodeId> {
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let w = g.constant(weights);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Compares reverse-mode gradients of `f` with respect to every input
/// against central differences. Returns the worst relative error over the
/// inputs.
pub fn gradcheck<F>(inputs: &[Tensor], rng: &mut impl rand::Rng, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &ids)?;
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let weights = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let loss = reduce(&mut g, out, &weights)?;
    g.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.param(t)).collect();
        let out = f(&mut g, &ids)?;
        let l = reduce(&mut g, out, &weights)?;
        Ok(g.value(l).data()[0])
    };

    let mut worst = 0.0f64;
    for (k, id) in ids.iter().enumerate() {
        let analytic = flat_grads(&g, &[*id]);
        let mut numeric = vec![0.0; inputs[k].len()];
        let mut xs = inputs.to_vec();
        for (e, slot) in numeric.iter_mut().enumerate() {
            let x0 = inputs[k].data()[e];
            xs[k].data_mut()[e] = x0 + FD_STEP;
            let up = eval(&xs)?;
            xs[k].data_mut()[e] = x0 - FD_STEP;
            let down = eval(&xs)?;
            xs[k].data_mut()[e] = x0;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Gradient check over all parameters of a model for a scalar objective
/// built by `objective` from the bound model.
pub fn model_gradcheck<M, F>(model: &M, objective: F) -> Result<f64>
where
    M: Model + Clone,
    F: Fn(&mut Graph, &M, &M::Bound) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let loss = objective(&mut g, model, &bound)?;
    g.backward(loss)?;
    let analytic = flat_grads(&g, &M::bound_ids(&bound));

    let value = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let l = objective(&mut g, m, &b)?;
        Ok(g.value(l).data()[0])
    };
    let theta = flat_params(model);
    let mut probe = model.clone();
    let mut moved = theta.clone();
    let mut numeric = vec![0.0; theta.len()];
    for (e, slot) in numeric.iter_mut().enumerate() {
        moved[e] = theta[e] + FD_STEP;
        set_flat_params(&mut probe, &moved)?;
        let up = value(&probe)?;
        moved[e] = theta[e] - FD_STEP;
        set_flat_params(&mut probe, &moved)?;
        let down = value(&probe)?;
        moved[e] = theta[e];
        *slot = (up - down) / (2.0 * FD_STEP);
    }
    Ok(relative_error(&analytic, &numeric))
}

pub fn random_tensor(rng: &mut impl rand::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Values with magnitude in `[gap, hi)` and random sign, keeping away from
/// a kink at zero.
pub fn away_from_zero(rng: &mut impl rand::Rng, shape: &[usize], gap: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

/// Direct evaluation of the three continual-learning metrics.
#[allow(clippy::needless_range_loop)]
pub fn brute_metrics(a: &[Vec<f64>], baseline: Option<&[f64]>) -> (f64, f64, Option<f64>) {
    let t = a.len();
    let mut aac = 0.0;
    for i in 0..t {
        aac += a[t - 1][i];
    }
    let mut bwt = 0.0;
    for i in 0..t - 1 {
        bwt += a[t - 1][i] - a[i][i];
    }
    let fwt = baseline.map(|b| {
        let mut s = 0.0;
        for i in 1..t {
            s += a[i - 1][i] - b[i];
        }
        s / (t - 1) as f64
    });
    (aac / t as f64, bwt / (t - 1) as f64, fwt)
}

pub fn random_matrix(rng: &mut impl rand::Rng, t: usize, with_baseline: bool) -> (Vec<Vec<f64>>, Option<Vec<f64>>) {
    let rows: Vec<Vec<f64>> = (0..t).map(|_| (0..t).map(|_| rng.random::<f64>()).collect()).collect();
    let base = with_baseline.then(|| (0..t).map(|_| rng.random::<f64>()).collect());
    (rows, base)
}

pub fn matrix(rows: &[Vec<f64>], baseline: Option<Vec<f64>>) -> AccuracyMatrix {
    AccuracyMatrix::from_rows(rows, baseline)
}

/// The four architectures compared by the directional experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Feature ensemble with gates and cooperation loss.
    CoScl,
    /// Plain feature ensemble.
    FeatureEnsemble,
    ClassifierEnsemble,
    Single,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::CoScl => "coscl",
            Variant::FeatureEnsemble => "fe",
            Variant::ClassifierEnsemble => "ce",
            Variant::Single => "scl",
        }
    }
}

/// The 10-task gaussian-blob experiment used by the directional checks:
/// EWC, five learners, whole-model budget `budget`.
pub fn blob_experiment(variant: Variant, budget: usize, seeds: &[u64], out: &Path) -> ExperimentConfig {
    let (arch, k, gates, ec) = match variant {
        Variant::CoScl => ("feature_ensemble", 5, true, true),
        Variant::FeatureEnsemble => ("feature_ensemble", 5, false, false),
        Variant::ClassifierEnsemble => ("classifier_ensemble", 5, false, false),
        Variant::Single => ("single", 1, false, false),
    };
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let text = format!(
        r#"
name = "{name}-{budget}"

[stream]
kind = "gaussian_blobs"
tasks = 10
classes_per_task = 2
difficulty = 1.5
n_train = 30
n_test = 1000
input_dim = 16
seed = 0

[ensemble]
k = {k}
architecture = "{arch}"
use_gates = {gates}
use_ec = {ec}
gamma = 0.02
gate_scale = 100.0

[ensemble.learner]
hidden_widths = [64]
feature_dim = 32
dropout_rate = 0.5

[budget]
total = {budget}

[strategy]
kind = "ewc"
lambda = 100.0

[train]
epochs = 50
batch_size = 64
optimizer = {{ kind = "adam", lr = 0.001, beta1 = 0.9, beta2 = 0.999, eps = 1e-8 }}

[run]
seeds = [{seeds}]
workers = {workers}
output_dir = "{out}"
baseline = false
checkpoints = false
"#,
        name = variant.name(),
        seeds = seeds.join(", "),
        workers = std::thread::available_parallelism().map_or(1, |n| n.get()),
        out = out.display(),
    );
    ExperimentConfig::from_toml(&text).expect("valid acceptance config")
}

/// Training phase with dropout keyed by a fixed seed and step.
pub fn train_phase(seed: u64, step: u64) -> Phase {
    Phase::Train { seed, step }
}
