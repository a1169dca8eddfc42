//! Small MLP learners and parameter-budget accounting.
//!
//! A learner is a ReLU MLP whose final layer (the mix layer) linearly maps
//! the last hidden representation into the feature space shared by every
//! learner of an ensemble. The mix layer has no nonlinearity.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub feature_dim: usize,
    pub dropout_rate: f64,
    pub init_seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            input_dim: 16,
            hidden_widths: vec![64],
            feature_dim: 32,
            dropout_rate: 0.0,
            init_seed: 0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::Config(format!(
                "learner dimensions must be positive (input {}, hidden {:?}, feature {})",
                self.input_dim, self.hidden_widths, self.feature_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters, biases included.
    pub fn parameter_count(&self) -> usize {
        count_for_widths(self.input_dim, &self.hidden_widths, self.feature_dim)
    }
}

fn count_for_widths(input: usize, hidden: &[usize], feature: usize) -> usize {
    let mut prev = input;
    let mut n = 0;
    for &w in hidden {
        n += prev * w + w;
        prev = w;
    }
    n + prev * feature + feature
}

/// Dense layer computing `x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl Linear {
    /// Uniform fan-in initialization with bound `gain * sqrt(3 / fan_in)`;
    /// zero bias.
    pub fn init(fan_in: usize, fan_out: usize, gain: f64, rng: &mut Rng) -> Self {
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("sized"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundLinear {
        BoundLinear {
            weight: g.param(&self.weight),
            bias: g.param(&self.bias),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

impl BoundLinear {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let z = g.matmul(x, self.weight)?;
        g.add(z, self.bias)
    }

    pub fn ids(&self) -> [NodeId; 2] {
        [self.weight, self.bias]
    }
}

/// Whether a forward pass is for training (dropout active) or evaluation.
///
/// In training, dropout masks are a pure function of `(seed, step)` plus the
/// learner and layer position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Eval,
    Train { seed: u64, step: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    pub layers: Vec<Linear>,
    pub mix: Linear,
    pub config: LearnerConfig,
}

#[derive(Debug, Clone)]
pub struct BoundLearner {
    pub layers: Vec<BoundLinear>,
    pub mix: BoundLinear,
}

impl Learner {
    pub fn new(cfg: &LearnerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::rng(cfg.init_seed, &[rng::TAG_INIT]);
        let gain = 2f64.sqrt();
        let mut prev = cfg.input_dim;
        let mut layers = Vec::with_capacity(cfg.hidden_widths.len());
        for &w in &cfg.hidden_widths {
            layers.push(Linear::init(prev, w, gain, &mut rng));
            prev = w;
        }
        let mix = Linear::init(prev, cfg.feature_dim, 1.0, &mut rng);
        Ok(Learner {
            layers,
            mix,
            config: cfg.clone(),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Linear::parameter_count).sum::<usize>() + self.mix.parameter_count()
    }

    pub fn feature_dim(&self) -> usize {
        self.mix.out_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().unwrap_or(&self.mix).in_dim()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .chain(std::iter::once(&self.mix))
            .flat_map(|l| l.tensors())
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .chain(std::iter::once(&mut self.mix))
            .flat_map(|l| l.tensors_mut())
            .collect()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundLearner {
        BoundLearner {
            layers: self.layers.iter().map(|l| l.bind(g)).collect(),
            mix: self.mix.bind(g),
        }
    }

    /// Feature map `[B, input_dim] -> [B, feature_dim]`. `slot` identifies
    /// the learner inside its ensemble so that dropout masks differ between
    /// learners at the same step.
    pub fn features(
        &self,
        g: &mut Graph,
        bound: &BoundLearner,
        x: NodeId,
        phase: Phase,
        slot: usize,
    ) -> Result<NodeId> {
        let width = g.shape(x).get(1).copied().unwrap_or(0);
        if g.shape(x).len() != 2 || width != self.input_dim() {
            return Err(Error::dim("learner input", g.shape(x), &[self.input_dim()]));
        }
        let mut h = x;
        for (depth, layer) in bound.layers.iter().enumerate() {
            let z = layer.forward(g, h)?;
            h = g.relu(z);
            if let Phase::Train { seed, step } = phase {
                if self.config.dropout_rate > 0.0 {
                    let mask = dropout_mask(
                        g.shape(h),
                        self.config.dropout_rate,
                        rng::derive(seed, &[rng::TAG_DROPOUT, step, slot as u64, depth as u64]),
                    );
                    let m = g.constant_owned(mask);
                    h = g.mul(h, m)?;
                }
            }
        }
        bound.mix.forward(g, h)
    }

    /// Evaluation-mode features outside of any training graph.
    pub fn features_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let xi = g.constant(x);
        let f = self.features(&mut g, &b, xi, Phase::Eval, 0)?;
        Ok(g.value(f).clone())
    }
}

/// Inverted-dropout mask: kept units are scaled by `1 / (1 - rate)`.
fn dropout_mask(shape: &[usize], rate: f64, seed: u64) -> Tensor {
    let mut rng = rng::rng(seed, &[]);
    let keep = 1.0 / (1.0 - rate);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

/// Scales the template's hidden widths by the largest uniform factor for
/// which `k` learners fit in `total_budget` parameters. Widths are rounded
/// down and never drop below one.
pub fn budget_match(total_budget: usize, k: usize, template: &LearnerConfig) -> Result<LearnerConfig> {
    template.validate()?;
    if k == 0 {
        return Err(Error::Config("learner count must be at least 1".into()));
    }
    let per_learner = total_budget / k;
    let (input, feature) = (template.input_dim, template.feature_dim);
    let base = &template.hidden_widths;

    // Widths at factor n / base[i], computed in integers so that breakpoints
    // are hit exactly.
    let widths_at = |n: usize, den: usize| -> Vec<usize> {
        base.iter().map(|&w| (n * w / den).max(1)).collect()
    };
    let fits = |ws: &[usize]| k * count_for_widths(input, ws, feature) <= total_budget;

    let min_widths = vec![1; base.len()];
    if !fits(&min_widths) {
        return Err(Error::Config(format!(
            "budget {total_budget} cannot hold {k} learners (minimum {} parameters each)",
            count_for_widths(input, &min_widths, feature)
        )));
    }

    // Every width change happens at a factor n / base[i]; the largest
    // feasible breakpoint over all layers determines the widths.
    let mut best: Option<(usize, usize)> = None;
    for &den in base {
        let (mut lo, mut hi) = (0usize, per_learner.max(1) * den + 1);
        while lo + 1 < hi {
            let mid = lo + (hi - lo) / 2;
            if fits(&widths_at(mid, den)) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if lo == 0 {
            continue;
        }
        best = match best {
            Some((bn, bd)) if bn * den >= lo * bd => Some((bn, bd)),
            _ => Some((lo, den)),
        };
    }
    let hidden_widths = match best {
        Some((n, den)) => widths_at(n, den),
        None => min_widths,
    };
    Ok(LearnerConfig {
        hidden_widths,
        ..template.clone()
    })
}
