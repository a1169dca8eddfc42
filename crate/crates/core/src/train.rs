//! Sequential task training for feature ensembles, single learners and
//! classifier ensembles.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ensemble::{coscl_objective, BoundEnsemble, forward_classifier_ensemble, Architecture, EnsembleConfig, EnsembleModel};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::learner::Phase;
use crate::model::{accuracy_from_scores, eval_logits, Model};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng;
use crate::strategy::{Strategy, StrategyConfig};
use crate::stream::{Batch, Task};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::adam(1e-3),
            batch_size: 64,
            epochs: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        let lr = match self.optimizer {
            OptimizerKind::Sgd { lr } | OptimizerKind::Adam { lr, .. } => lr,
        };
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub cross_entropy: f64,
    pub cooperation: Option<f64>,
}

/// One optimizer update on a mini-batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut EnsembleModel,
    strategy: &Strategy,
    opt: &mut Optimizer,
    x: &Tensor,
    labels: &[usize],
    task: usize,
    gamma: f64,
    phase: Phase,
) -> Result<StepStats> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let xi = g.constant(x);
    let step_seed = match phase {
        Phase::Train { seed, step } => rng::derive(seed, &[step]),
        Phase::Eval => 0,
    };
    let penalty = strategy.penalty(&mut g, model, &bound, phase, step_seed)?;
    let obj = coscl_objective(&mut g, model, &bound, xi, labels, task, penalty, gamma, phase)?;
    g.backward(obj.total)?;
    let ids = EnsembleModel::bound_ids(&bound);
    let grads: Vec<Option<&[f64]>> = ids.iter().map(|&id| g.grad(id)).collect();
    let mut params: Vec<&mut [f64]> = model.parameters_mut().into_iter().map(Tensor::data_mut).collect();
    opt.step(&mut params, &grads)?;
    Ok(StepStats {
        loss: g.value(obj.total).data()[0],
        cross_entropy: g.value(obj.cross_entropy).data()[0],
        cooperation: obj.cooperation.map(|c| g.value(c).data()[0]),
    })
}

/// Runs `cfg.epochs` passes over `data` with a fresh optimizer. `step`
/// counts updates across the whole run and keys the dropout masks.
#[allow(clippy::too_many_arguments)]
pub fn train_task(
    model: &mut EnsembleModel,
    strategy: &Strategy,
    data: &Batch,
    task: usize,
    cfg: &TrainConfig,
    gamma: f64,
    seed: u64,
    step: &mut u64,
) -> Result<StepStats> {
    if data.is_empty() {
        return Err(Error::Contract(format!("task {task} has no training data")));
    }
    let sizes: Vec<usize> = model.parameters().iter().map(|t| t.len()).collect();
    let mut opt = Optimizer::new(cfg.optimizer, &sizes);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let mut last = StepStats {
        loss: 0.0,
        cross_entropy: 0.0,
        cooperation: None,
    };
    for epoch in 0..cfg.epochs {
        let mut r = rng::rng(seed, &[rng::TAG_SHUFFLE, task as u64, epoch as u64]);
        idx.shuffle(&mut r);
        let (mut loss, mut ce, mut ec, mut n) = (0.0, 0.0, None::<f64>, 0.0);
        for chunk in idx.chunks(cfg.batch_size) {
            let b = data.select(chunk)?;
            let phase = Phase::Train { seed, step: *step };
            *step += 1;
            let s = train_step(model, strategy, &mut opt, &b.x, &b.y, task, gamma, phase)?;
            if !s.loss.is_finite() {
                return Err(Error::Contract(format!("non-finite loss on task {task} at epoch {epoch}")));
            }
            let w = chunk.len() as f64;
            loss += w * s.loss;
            ce += w * s.cross_entropy;
            if let Some(c) = s.cooperation {
                ec = Some(ec.unwrap_or(0.0) + w * c);
            }
            n += w;
        }
        last = StepStats {
            loss: loss / n,
            cross_entropy: ce / n,
            cooperation: ec.map(|c| c / n),
        };
    }
    Ok(last)
}

/// A continual learner together with its strategy state. Classifier
/// ensembles hold one single-learner member per ensemble slot; every other
/// architecture holds exactly one member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinualSystem {
    pub architecture: Architecture,
    pub members: Vec<EnsembleModel>,
    pub strategies: Vec<Strategy>,
    pub gamma: f64,
}

impl ContinualSystem {
    pub fn new(cfg: &EnsembleConfig, strategy: &StrategyConfig, head_dims: &[usize]) -> Result<Self> {
        strategy.validate()?;
        let members = match cfg.architecture {
            Architecture::ClassifierEnsemble => (0..cfg.k)
                .map(|i| {
                    let mut learner = cfg.learner.clone();
                    learner.init_seed = rng::derive(cfg.learner.init_seed, &[rng::TAG_INIT, u64::MAX - 1, i as u64]);
                    let member = EnsembleConfig {
                        gate_scale: cfg.gate_scale,
                        ..EnsembleConfig::single(learner)
                    };
                    EnsembleModel::new(&member, head_dims)
                })
                .collect::<Result<Vec<_>>>()?,
            _ => vec![EnsembleModel::new(cfg, head_dims)?],
        };
        if members.is_empty() {
            return Err(Error::Config("ensemble needs at least one learner".into()));
        }
        let strategies = members.iter().map(|_| Strategy::new(strategy.clone())).collect();
        Ok(ContinualSystem {
            architecture: cfg.architecture,
            members,
            strategies,
            gamma: cfg.effective_gamma(),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.members.iter().map(Model::parameter_count).sum()
    }

    pub fn num_tasks(&self) -> usize {
        self.members[0].num_tasks()
    }

    fn member_seed(&self, seed: u64, i: usize) -> u64 {
        if self.members.len() == 1 {
            seed
        } else {
            rng::derive(seed, &[i as u64])
        }
    }

    /// Trains every member on the task. `steps` holds one update counter per
    /// member and is created on first use.
    pub fn train_task(&mut self, task: &Task, cfg: &TrainConfig, seed: u64, steps: &mut Vec<u64>) -> Result<Vec<StepStats>> {
        let data = task.train_batch()?;
        steps.resize(self.members.len(), 0);
        let seeds: Vec<u64> = (0..self.members.len()).map(|i| self.member_seed(seed, i)).collect();
        self.members
            .iter_mut()
            .zip(&self.strategies)
            .zip(seeds)
            .zip(steps.iter_mut())
            .map(|(((m, s), sd), st)| train_task(m, s, &data, task.id, cfg, self.gamma, sd, st))
            .collect()
    }

    /// Task-boundary update of every member's strategy state.
    pub fn consolidate(&mut self, task: &Task, seed: u64) -> Result<()> {
        let data = task.train_batch()?;
        let seeds: Vec<u64> = (0..self.members.len()).map(|i| self.member_seed(seed, i)).collect();
        for ((m, s), sd) in self.members.iter().zip(self.strategies.iter_mut()).zip(seeds) {
            s.consolidate(m, task, &data, sd)?;
        }
        Ok(())
    }

    /// Class scores for a batch: averaged probabilities for classifier
    /// ensembles, logits otherwise.
    pub fn scores(&self, x: &Tensor, task: usize) -> Result<Tensor> {
        match self.architecture {
            Architecture::ClassifierEnsemble => forward_classifier_ensemble(&self.members, x, task),
            _ => eval_logits(&self.members[0], x, task),
        }
    }

    pub fn accuracy(&self, data: &Batch, task: usize) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Contract(format!("task {task} has no evaluation data")));
        }
        Ok(accuracy_from_scores(&self.scores(&data.x, task)?, &data.y))
    }
}

/// The system as one model: classifier ensembles score with the log of the
/// averaged member probabilities, every other architecture with its single
/// member's logits.
impl Model for ContinualSystem {
    type Bound = Vec<BoundEnsemble>;

    fn parameters(&self) -> Vec<&Tensor> {
        self.members.iter().flat_map(Model::parameters).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.members.iter_mut().flat_map(Model::parameters_mut).collect()
    }

    fn bind(&self, g: &mut Graph) -> Vec<BoundEnsemble> {
        self.members.iter().map(|m| m.bind(g)).collect()
    }

    fn bound_ids(bound: &Vec<BoundEnsemble>) -> Vec<NodeId> {
        bound.iter().flat_map(EnsembleModel::bound_ids).collect()
    }

    fn logits(&self, g: &mut Graph, bound: &Vec<BoundEnsemble>, x: NodeId, task: usize, phase: Phase) -> Result<NodeId> {
        if self.architecture != Architecture::ClassifierEnsemble {
            return self.members[0].logits(g, &bound[0], x, task, phase);
        }
        let mut acc: Option<NodeId> = None;
        for (m, b) in self.members.iter().zip(bound) {
            let z = m.logits(g, b, x, task, phase)?;
            let p = g.softmax_rows(z)?;
            acc = Some(match acc {
                None => p,
                Some(a) => g.add(a, p)?,
            });
        }
        let mean = g.scale(acc.expect("members nonempty"), 1.0 / self.members.len() as f64);
        Ok(g.log(mean))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::LearnerConfig;
    use crate::stream::{generate, StreamKind, StreamSpec};

    fn stream() -> Vec<Task> {
        generate(&StreamSpec {
            kind: StreamKind::GaussianBlobs,
            tasks: 2,
            classes_per_task: 2,
            n_train: 40,
            n_test: 40,
            input_dim: 12,
            seed: 3,
            difficulty: 0.0,
        })
        .unwrap()
    }

    fn ens(arch: Architecture, k: usize) -> EnsembleConfig {
        EnsembleConfig {
            k,
            architecture: arch,
            learner: LearnerConfig {
                input_dim: 12,
                hidden_widths: vec![8],
                feature_dim: 6,
                dropout_rate: 0.1,
                init_seed: 5,
            },
            ..EnsembleConfig::default()
        }
    }

    fn fast() -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerKind::adam(1e-2),
            batch_size: 16,
            epochs: 15,
        }
    }

    #[test]
    fn learns_an_easy_task() {
        let tasks = stream();
        for (arch, k) in [
            (Architecture::FeatureEnsemble, 3),
            (Architecture::Single, 1),
            (Architecture::ClassifierEnsemble, 3),
        ] {
            let mut sys = ContinualSystem::new(&ens(arch, k), &StrategyConfig::None, &[2, 2]).unwrap();
            let before = sys.accuracy(&tasks[0].test_batch().unwrap(), 0).unwrap();
            let mut steps = Vec::new();
            sys.train_task(&tasks[0], &fast(), 9, &mut steps).unwrap();
            let after = sys.accuracy(&tasks[0].test_batch().unwrap(), 0).unwrap();
            assert!(after > 0.85 && after >= before, "{arch:?}: {before} -> {after}");
            assert_eq!(steps.len(), sys.members.len());
            assert_eq!(steps[0], 15 * 5);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let tasks = stream();
        let run = || {
            let cfg = ens(Architecture::FeatureEnsemble, 2);
            let strat = StrategyConfig::Ewc {
                lambda: 10.0,
                fisher_samples: Some(20),
            };
            let mut sys = ContinualSystem::new(&cfg, &strat, &[2, 2]).unwrap();
            let mut steps = Vec::new();
            for t in &tasks {
                sys.train_task(t, &fast(), 1, &mut steps).unwrap();
                sys.consolidate(t, 1).unwrap();
            }
            sys
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn untouched_heads_stay_fixed() {
        let tasks = stream();
        let mut sys = ContinualSystem::new(&ens(Architecture::FeatureEnsemble, 2), &StrategyConfig::None, &[2, 2]).unwrap();
        let head1 = sys.members[0].heads[1].clone();
        let alphas1 = sys.members[0].alphas[1].clone();
        sys.train_task(&tasks[0], &fast(), 0, &mut Vec::new()).unwrap();
        assert_eq!(sys.members[0].heads[1], head1);
        assert_eq!(sys.members[0].alphas[1], alphas1);
        assert_ne!(sys.members[0].alphas[0][0].data()[0], 0.0);
    }

    #[test]
    fn classifier_members_differ() {
        let sys = ContinualSystem::new(&ens(Architecture::ClassifierEnsemble, 3), &StrategyConfig::None, &[2]).unwrap();
        assert_eq!(sys.members.len(), 3);
        assert!(sys.members.iter().all(|m| m.mode == Architecture::Single && m.k() == 1));
        assert_ne!(sys.members[0].learners[0], sys.members[1].learners[0]);
        assert_eq!(sys.gamma, 0.0);
    }

    #[test]
    fn system_scores_match_model_view() {
        let tasks = stream();
        let b = tasks[1].test_batch().unwrap();
        for arch in [Architecture::ClassifierEnsemble, Architecture::FeatureEnsemble] {
            let sys = ContinualSystem::new(&ens(arch, 3), &StrategyConfig::None, &[2, 2]).unwrap();
            let scores = sys.scores(&b.x, 1).unwrap();
            let logits = eval_logits(&sys, &b.x, 1).unwrap();
            for (s, l) in scores.data().iter().zip(logits.data()) {
                let expect = if arch == Architecture::ClassifierEnsemble { s.ln() } else { *s };
                assert!((expect - l).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            optimizer: OptimizerKind::adam(-1.0),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
