//! Old-task constraints added to the current task loss: quadratic
//! importance-weighted penalties (EWC, MAS) and experience replay.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::learner::Phase;
use crate::model::{flat_grads, flat_params, Model};
use crate::rng::{self, Rng};
use crate::stream::{Batch, Task};
use crate::tensor::Tensor;

/// Anchor parameters and per-parameter importance for the penalty
/// `lambda * sum_i importance_i * (theta_i - anchor_i)^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceState {
    pub anchor: Vec<f64>,
    pub importance: Vec<f64>,
    pub lambda: f64,
}

impl ImportanceState {
    /// Adds `fresh` importance to the running sum and moves the anchor to
    /// the model's current parameters.
    fn accumulate<M: Model + ?Sized>(prev: Option<&ImportanceState>, model: &M, fresh: Vec<f64>, lambda: f64) -> Result<Self> {
        let importance = match prev {
            Some(p) => {
                if p.importance.len() != fresh.len() {
                    return Err(Error::dim("importance", &[p.importance.len()], &[fresh.len()]));
                }
                p.importance.iter().zip(&fresh).map(|(a, b)| a + b).collect()
            }
            None => fresh,
        };
        Ok(ImportanceState {
            anchor: flat_params(model),
            importance,
            lambda,
        })
    }
}

fn per_sample<M, F>(model: &M, data: &Batch, task: usize, limit: Option<usize>, mut objective: F) -> Result<Vec<f64>>
where
    M: Model + ?Sized,
    F: FnMut(&mut Graph, NodeId) -> Result<(NodeId, bool)>,
{
    if data.is_empty() {
        return Err(Error::Contract("consolidation needs task data".into()));
    }
    let n = limit.map_or(data.len(), |l| l.clamp(1, data.len()));
    let mut acc = vec![0.0; model.parameter_count()];
    for r in 0..n {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let x = g.constant_owned(data.x.gather_rows(&[r])?);
        let z = model.logits(&mut g, &bound, x, task, Phase::Eval)?;
        let (loss, absolute) = objective(&mut g, z)?;
        g.backward(loss)?;
        let grads = flat_grads(&g, &M::bound_ids(&bound));
        for (a, d) in acc.iter_mut().zip(grads) {
            *a += if absolute { d.abs() } else { d * d };
        }
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok(acc)
}

/// Diagonal empirical Fisher at the model's own most likely label: the
/// mean over samples of the squared gradient of `log p(argmax | x)`.
pub fn fisher_diagonal<M: Model + ?Sized>(model: &M, data: &Batch, task: usize, limit: Option<usize>) -> Result<Vec<f64>> {
    per_sample(model, data, task, limit, |g, z| {
        let pred = crate::model::argmax(g.value(z).row(0));
        Ok((g.softmax_cross_entropy(z, &[pred])?, false))
    })
}

/// Mean absolute gradient of the squared L2 norm of the logits.
pub fn mas_importance<M: Model + ?Sized>(model: &M, data: &Batch, task: usize, limit: Option<usize>) -> Result<Vec<f64>> {
    per_sample(model, data, task, limit, |g, z| {
        let sq = g.mul(z, z)?;
        Ok((g.sum(sq), true))
    })
}

pub fn ewc_consolidate<M: Model + ?Sized>(
    model: &M,
    data: &Batch,
    task: usize,
    prev: Option<&ImportanceState>,
    lambda: f64,
    limit: Option<usize>,
) -> Result<ImportanceState> {
    let fisher = fisher_diagonal(model, data, task, limit)?;
    ImportanceState::accumulate(prev, model, fisher, lambda)
}

pub fn mas_consolidate<M: Model + ?Sized>(
    model: &M,
    data: &Batch,
    task: usize,
    prev: Option<&ImportanceState>,
    lambda: f64,
    limit: Option<usize>,
) -> Result<ImportanceState> {
    let imp = mas_importance(model, data, task, limit)?;
    ImportanceState::accumulate(prev, model, imp, lambda)
}

/// Differentiable quadratic penalty over the bound parameter leaves.
pub fn penalty(g: &mut Graph, state: &ImportanceState, params: &[NodeId]) -> Result<NodeId> {
    let total: usize = params.iter().map(|&p| g.value(p).len()).sum();
    if total != state.anchor.len() || total != state.importance.len() {
        return Err(Error::Contract(format!(
            "penalty over {total} parameters with state of {} / {}",
            state.anchor.len(),
            state.importance.len()
        )));
    }
    let mut off = 0;
    let mut acc: Option<NodeId> = None;
    for &p in params {
        let shape = g.shape(p).to_vec();
        let n = g.value(p).len();
        let imp = &state.importance[off..off + n];
        if imp.iter().all(|&v| v == 0.0) {
            off += n;
            continue;
        }
        let anchor = g.constant_owned(Tensor::new(shape.clone(), state.anchor[off..off + n].to_vec())?);
        let weight = g.constant_owned(Tensor::new(shape, imp.to_vec())?);
        off += n;
        let d = g.sub(p, anchor)?;
        let sq = g.mul(d, d)?;
        let w = g.mul(sq, weight)?;
        let s = g.sum(w);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    let acc = match acc {
        Some(a) => a,
        None => g.constant_owned(Tensor::scalar(0.0)),
    };
    Ok(g.scale(acc, state.lambda))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySample {
    pub task: usize,
    pub x: Vec<f64>,
    /// Head-local label within `task`.
    pub label: usize,
}

/// Per-class reservoir of past training samples.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub per_class_capacity: usize,
    pub samples: BTreeMap<usize, Vec<ReplaySample>>,
    seen: BTreeMap<usize, usize>,
}

impl ReplayBuffer {
    pub fn new(per_class_capacity: usize) -> Self {
        ReplayBuffer {
            per_class_capacity,
            ..ReplayBuffer::default()
        }
    }

    pub fn len(&self) -> usize {
        self.samples.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reservoir-samples each class of the task's training set down to the
    /// per-class capacity. Deterministic in `seed`.
    pub fn update(&mut self, task: &Task, seed: u64) {
        let mut r = rng::rng(seed, &[rng::TAG_REPLAY, task.id as u64]);
        let cap = self.per_class_capacity;
        for s in &task.train {
            let Some(local) = task.local_label(s.label) else { continue };
            let seen = self.seen.entry(s.label).or_insert(0);
            *seen += 1;
            let slot = self.samples.entry(s.label).or_default();
            let item = ReplaySample {
                task: task.id,
                x: s.x.clone(),
                label: local,
            };
            if slot.len() < cap {
                slot.push(item);
            } else if cap > 0 {
                let j = r.random_range(0..*seen);
                if j < cap {
                    slot[j] = item;
                }
            }
        }
    }

    pub fn all(&self) -> Vec<&ReplaySample> {
        self.samples.values().flatten().collect()
    }

    /// Up to `max` samples drawn without replacement.
    pub fn draw(&self, max: usize, rng: &mut Rng) -> Vec<&ReplaySample> {
        let mut all = self.all();
        if all.len() > max {
            rand::seq::SliceRandom::partial_shuffle(&mut all[..], rng, max);
            all.truncate(max);
        }
        all
    }
}

/// Mean cross-entropy over the given replay samples, each routed through
/// its own task head. No samples give an exact zero.
pub fn replay_loss<M: Model + ?Sized>(
    g: &mut Graph,
    model: &M,
    bound: &M::Bound,
    samples: &[&ReplaySample],
    phase: Phase,
) -> Result<NodeId> {
    if samples.is_empty() {
        return Ok(g.constant_owned(Tensor::scalar(0.0)));
    }
    let mut by_task: BTreeMap<usize, (Vec<Vec<f64>>, Vec<usize>)> = BTreeMap::new();
    for s in samples {
        let e = by_task.entry(s.task).or_default();
        e.0.push(s.x.clone());
        e.1.push(s.label);
    }
    let total = samples.len() as f64;
    let mut acc: Option<NodeId> = None;
    for (task, (rows, labels)) in by_task {
        let x = g.constant_owned(Tensor::from_rows(&rows)?);
        let z = model.logits(g, bound, x, task, phase)?;
        let ce = g.softmax_cross_entropy(z, &labels)?;
        let w = g.scale(ce, labels.len() as f64 / total);
        acc = Some(match acc {
            None => w,
            Some(a) => g.add(a, w)?,
        });
    }
    Ok(acc.expect("nonempty"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyConfig {
    #[default]
    None,
    Ewc {
        lambda: f64,
        #[serde(default)]
        fisher_samples: Option<usize>,
    },
    Mas {
        lambda: f64,
        #[serde(default)]
        importance_samples: Option<usize>,
    },
    Replay {
        per_class: usize,
        #[serde(default = "one")]
        weight: f64,
        #[serde(default = "default_replay_batch")]
        batch: usize,
    },
}

fn one() -> f64 {
    1.0
}

fn default_replay_batch() -> usize {
    64
}

impl StrategyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyConfig::None => "none",
            StrategyConfig::Ewc { .. } => "ewc",
            StrategyConfig::Mas { .. } => "mas",
            StrategyConfig::Replay { .. } => "er",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            StrategyConfig::Ewc { lambda, .. } | StrategyConfig::Mas { lambda, .. }
                if !(lambda.is_finite() && lambda >= 0.0) =>
            {
                Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")))
            }
            StrategyConfig::Replay { weight, batch, .. } if !(weight.is_finite() && weight >= 0.0) || batch == 0 => {
                Err(Error::Config("replay weight must be >= 0 and batch positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Live strategy state of one model during a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub config: StrategyConfig,
    pub importance: Option<ImportanceState>,
    pub replay: Option<ReplayBuffer>,
}

impl Strategy {
    pub fn new(config: StrategyConfig) -> Self {
        let replay = match config {
            StrategyConfig::Replay { per_class, .. } => Some(ReplayBuffer::new(per_class)),
            _ => None,
        };
        Strategy {
            config,
            importance: None,
            replay,
        }
    }

    /// The old-task term for one training step, already weighted. `None`
    /// when the strategy contributes nothing yet.
    pub fn penalty<M: Model + ?Sized>(
        &self,
        g: &mut Graph,
        model: &M,
        bound: &M::Bound,
        phase: Phase,
        step_seed: u64,
    ) -> Result<Option<NodeId>> {
        match (&self.config, &self.importance, &self.replay) {
            (StrategyConfig::Ewc { .. } | StrategyConfig::Mas { .. }, Some(state), _) => {
                let ids = M::bound_ids(bound);
                Ok(Some(penalty(g, state, &ids)?))
            }
            (StrategyConfig::Replay { weight, batch, .. }, _, Some(buf)) if !buf.is_empty() => {
                let mut r = rng::rng(step_seed, &[rng::TAG_REPLAY]);
                let drawn = buf.draw(*batch, &mut r);
                let l = replay_loss(g, model, bound, &drawn, phase)?;
                Ok(Some(g.scale(l, *weight)))
            }
            _ => Ok(None),
        }
    }

    /// Task-boundary update after training on `task`.
    pub fn consolidate<M: Model + ?Sized>(&mut self, model: &M, task: &Task, data: &Batch, seed: u64) -> Result<()> {
        match self.config {
            StrategyConfig::None => {}
            StrategyConfig::Ewc { lambda, fisher_samples } => {
                self.importance = Some(ewc_consolidate(model, data, task.id, self.importance.as_ref(), lambda, fisher_samples)?);
            }
            StrategyConfig::Mas {
                lambda,
                importance_samples,
            } => {
                self.importance = Some(mas_consolidate(
                    model,
                    data,
                    task.id,
                    self.importance.as_ref(),
                    lambda,
                    importance_samples,
                )?);
            }
            StrategyConfig::Replay { .. } => {
                if let Some(buf) = self.replay.as_mut() {
                    buf.update(task, seed);
                }
            }
        }
        Ok(())
    }
}
