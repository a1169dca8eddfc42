//! Cooperating small learners.
//!
//! `K` learners map an input into a common feature space. For task `t` each
//! learner's features are scaled by a gate `g[t][i] = sigmoid(s * alpha[t][i])`,
//! summed, and passed through the task's output head. The heads are per task
//! and shared by all learners. Cooperation is encouraged by the mean pairwise
//! KL divergence between the predictions each learner's gated features
//! produce through the same head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, NodeId};
use crate::learner::{BoundLearner, BoundLinear, Learner, LearnerConfig, Linear, Phase};
use crate::model::Model;
use crate::rng;
use crate::tensor::Tensor;

/// Gate pre-activations `s * alpha` are clamped to this magnitude so that
/// gates stay strictly inside `(0, 1)` in floating point.
pub const GATE_LOGIT_LIMIT: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Gated sum of learner features through a shared head.
    FeatureEnsemble,
    /// Average of the predicted probabilities of independently trained
    /// single-learner models.
    ClassifierEnsemble,
    /// One learner feeding the head directly.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub k: usize,
    pub gate_scale: f64,
    pub gamma: f64,
    pub use_gates: bool,
    pub use_ec: bool,
    pub architecture: Architecture,
    pub learner: LearnerConfig,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            k: 5,
            gate_scale: 100.0,
            gamma: 0.02,
            use_gates: true,
            use_ec: true,
            architecture: Architecture::FeatureEnsemble,
            learner: LearnerConfig::default(),
        }
    }
}

impl EnsembleConfig {
    /// The single-learner baseline with the same template.
    pub fn single(learner: LearnerConfig) -> Self {
        EnsembleConfig {
            k: 1,
            use_gates: false,
            use_ec: false,
            architecture: Architecture::Single,
            learner,
            ..EnsembleConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.learner.validate()?;
        if self.k == 0 {
            return Err(Error::Config("ensemble needs at least one learner".into()));
        }
        if self.architecture == Architecture::Single && self.k != 1 {
            return Err(Error::Config(format!("single architecture with k = {}", self.k)));
        }
        if !self.gate_scale.is_finite() || !self.gamma.is_finite() {
            return Err(Error::Config("gate scale and gamma must be finite".into()));
        }
        Ok(())
    }

    /// Strength of the cooperation term as applied during training.
    pub fn effective_gamma(&self) -> f64 {
        if self.use_ec && self.architecture == Architecture::FeatureEnsemble {
            self.gamma
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub learners: Vec<Learner>,
    /// `alphas[task][learner]`, each a one-element tensor. Empty when gates
    /// are disabled.
    pub alphas: Vec<Vec<Tensor>>,
    pub gate_scale: f64,
    pub heads: Vec<Linear>,
    pub mode: Architecture,
    pub use_gates: bool,
}

#[derive(Debug, Clone)]
pub struct BoundEnsemble {
    pub learners: Vec<BoundLearner>,
    pub alphas: Vec<Vec<NodeId>>,
    pub heads: Vec<BoundLinear>,
}

impl EnsembleModel {
    /// Builds a model with one head per entry of `head_dims`. Learner `i`
    /// is initialized from a seed derived from the template seed and `i`.
    pub fn new(cfg: &EnsembleConfig, head_dims: &[usize]) -> Result<Self> {
        cfg.validate()?;
        if cfg.architecture == Architecture::ClassifierEnsemble {
            return Err(Error::Config(
                "classifier ensembles are built from single-learner members".into(),
            ));
        }
        if head_dims.is_empty() || head_dims.contains(&0) {
            return Err(Error::Config(format!("invalid head sizes {head_dims:?}")));
        }
        let base_seed = cfg.learner.init_seed;
        let learners = (0..cfg.k)
            .map(|i| {
                let lc = LearnerConfig {
                    init_seed: rng::derive(base_seed, &[rng::TAG_INIT, i as u64]),
                    ..cfg.learner.clone()
                };
                Learner::new(&lc)
            })
            .collect::<Result<Vec<_>>>()?;
        let use_gates = cfg.use_gates && cfg.architecture == Architecture::FeatureEnsemble;
        let alphas = if use_gates {
            vec![vec![Tensor::scalar(0.0); cfg.k]; head_dims.len()]
        } else {
            Vec::new()
        };
        let d = cfg.learner.feature_dim;
        let heads = head_dims
            .iter()
            .enumerate()
            .map(|(t, &c)| {
                let mut r = rng::rng(base_seed, &[rng::TAG_INIT, u64::MAX, t as u64]);
                Linear::init(d, c, 1.0, &mut r)
            })
            .collect();
        Ok(EnsembleModel {
            learners,
            alphas,
            gate_scale: cfg.gate_scale,
            heads,
            mode: cfg.architecture,
            use_gates,
        })
    }

    pub fn k(&self) -> usize {
        self.learners.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dims(&self) -> Vec<usize> {
        self.heads.iter().map(Linear::out_dim).collect()
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.heads.len() {
            Err(Error::UnknownTask(task))
        } else {
            Ok(())
        }
    }

    /// Current gate values `sigmoid(s * alpha)` for a task; all ones when
    /// gates are disabled.
    pub fn gates(&self, task: usize) -> Result<Vec<f64>> {
        self.check_task(task)?;
        if !self.use_gates {
            return Ok(vec![1.0; self.k()]);
        }
        Ok(self.alphas[task]
            .iter()
            .map(|a| {
                let z = (self.gate_scale * a.data()[0]).clamp(-GATE_LOGIT_LIMIT, GATE_LOGIT_LIMIT);
                sigmoid(z)
            })
            .collect())
    }

    pub fn learner_parameter_count(&self) -> usize {
        self.learners.iter().map(Learner::parameter_count).sum()
    }

    /// Raw (ungated) features of every learner.
    pub fn all_features(
        &self,
        g: &mut Graph,
        bound: &BoundEnsemble,
        x: NodeId,
        phase: Phase,
    ) -> Result<Vec<NodeId>> {
        self.learners
            .iter()
            .zip(&bound.learners)
            .enumerate()
            .map(|(i, (l, b))| l.features(g, b, x, phase, i))
            .collect()
    }

    /// Applies the task gates to per-learner features.
    pub fn gate_features(
        &self,
        g: &mut Graph,
        bound: &BoundEnsemble,
        features: &[NodeId],
        task: usize,
    ) -> Result<Vec<NodeId>> {
        self.check_task(task)?;
        if !self.use_gates {
            return Ok(features.to_vec());
        }
        features
            .iter()
            .zip(&bound.alphas[task])
            .map(|(&f, &alpha)| {
                let z = g.scale(alpha, self.gate_scale);
                let z = g.clamp(z, -GATE_LOGIT_LIMIT, GATE_LOGIT_LIMIT);
                let gate = g.sigmoid(z);
                g.mul(f, gate)
            })
            .collect()
    }

    /// Sum of gated features, i.e. the input of the shared head.
    pub fn ensemble_feature(g: &mut Graph, gated: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = gated
            .split_first()
            .ok_or_else(|| Error::Contract("ensemble with no learners".into()))?;
        rest.iter().try_fold(first, |acc, &f| g.add(acc, f))
    }

    /// `head_t(sum_i g[t][i] * f_i(x))`.
    pub fn forward_joint(
        &self,
        g: &mut Graph,
        bound: &BoundEnsemble,
        x: NodeId,
        task: usize,
        phase: Phase,
    ) -> Result<NodeId> {
        if self.mode != Architecture::FeatureEnsemble {
            return Err(Error::Contract(format!(
                "forward_joint on a {:?} model",
                self.mode
            )));
        }
        self.check_task(task)?;
        let feats = self.all_features(g, bound, x, phase)?;
        let gated = self.gate_features(g, bound, &feats, task)?;
        let sum = Self::ensemble_feature(g, &gated)?;
        bound.heads[task].forward(g, sum)
    }

    /// The single-learner path: `head_t(f_0(x))`.
    pub fn forward_single(
        &self,
        g: &mut Graph,
        bound: &BoundEnsemble,
        x: NodeId,
        task: usize,
        phase: Phase,
    ) -> Result<NodeId> {
        self.check_task(task)?;
        let f = self.learners[0].features(g, &bound.learners[0], x, phase, 0)?;
        bound.heads[task].forward(g, f)
    }

    /// Per-learner predictive distributions `softmax(head_t(g[t][i] * f_i(x)))`
    /// computed from already-gated features.
    pub fn per_learner_probs(
        g: &mut Graph,
        bound: &BoundEnsemble,
        gated: &[NodeId],
        task: usize,
    ) -> Result<Vec<NodeId>> {
        let head = bound.heads.get(task).ok_or(Error::UnknownTask(task))?;
        gated
            .iter()
            .map(|&f| {
                let z = head.forward(g, f)?;
                g.softmax_rows(z)
            })
            .collect()
    }

    pub fn forward_per_learner(
        &self,
        g: &mut Graph,
        bound: &BoundEnsemble,
        x: NodeId,
        task: usize,
        phase: Phase,
    ) -> Result<Vec<NodeId>> {
        self.check_task(task)?;
        let feats = self.all_features(g, bound, x, phase)?;
        let gated = self.gate_features(g, bound, &feats, task)?;
        Self::per_learner_probs(g, bound, &gated, task)
    }

    /// Evaluation-mode per-learner probabilities as plain tensors.
    pub fn per_learner_probs_eval(&self, x: &Tensor, task: usize) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let xi = g.constant(x);
        let ps = self.forward_per_learner(&mut g, &b, xi, task, Phase::Eval)?;
        Ok(ps.into_iter().map(|p| g.value(p).clone()).collect())
    }

    /// Evaluation-mode ensemble feature (the head input) for a task.
    pub fn ensemble_feature_eval(&self, x: &Tensor, task: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let xi = g.constant(x);
        let feats = self.all_features(&mut g, &b, xi, Phase::Eval)?;
        let out = match self.mode {
            Architecture::FeatureEnsemble => {
                let gated = self.gate_features(&mut g, &b, &feats, task)?;
                Self::ensemble_feature(&mut g, &gated)?
            }
            _ => feats[0],
        };
        Ok(g.value(out).clone())
    }
}

impl Model for EnsembleModel {
    type Bound = BoundEnsemble;

    fn parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.learners.iter().flat_map(Learner::tensors).collect();
        out.extend(self.alphas.iter().flatten());
        out.extend(self.heads.iter().flat_map(Linear::tensors));
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .learners
            .iter_mut()
            .flat_map(Learner::tensors_mut)
            .collect();
        out.extend(self.alphas.iter_mut().flatten());
        out.extend(self.heads.iter_mut().flat_map(Linear::tensors_mut));
        out
    }

    fn bind(&self, g: &mut Graph) -> BoundEnsemble {
        BoundEnsemble {
            learners: self.learners.iter().map(|l| l.bind(g)).collect(),
            alphas: self
                .alphas
                .iter()
                .map(|row| row.iter().map(|a| g.param(a)).collect())
                .collect(),
            heads: self.heads.iter().map(|h| h.bind(g)).collect(),
        }
    }

    fn bound_ids(b: &BoundEnsemble) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = b
            .learners
            .iter()
            .flat_map(|l| l.layers.iter().chain(std::iter::once(&l.mix)))
            .flat_map(BoundLinear::ids)
            .collect();
        out.extend(b.alphas.iter().flatten());
        out.extend(b.heads.iter().flat_map(BoundLinear::ids));
        out
    }

    fn logits(
        &self,
        g: &mut Graph,
        bound: &BoundEnsemble,
        x: NodeId,
        task: usize,
        phase: Phase,
    ) -> Result<NodeId> {
        match self.mode {
            Architecture::FeatureEnsemble => self.forward_joint(g, bound, x, task, phase),
            _ => self.forward_single(g, bound, x, task, phase),
        }
    }
}

/// Mean pairwise KL divergence between learner predictions:
/// `(1/K) (1/N) sum_{i != j} sum_n sum_c p_i log(p_i / p_j)` over ordered
/// pairs. Fewer than two learners give an exact zero.
pub fn ec_loss(g: &mut Graph, probs: &[NodeId]) -> Result<NodeId> {
    let k = probs.len();
    if k < 2 {
        return Ok(g.constant_owned(Tensor::scalar(0.0)));
    }
    let shape = g.shape(probs[0]).to_vec();
    for &p in &probs[1..] {
        if g.shape(p) != shape.as_slice() {
            return Err(Error::dim("ec_loss", &shape, g.shape(p)));
        }
    }
    let n = shape[0] as f64;
    let logs: Vec<NodeId> = probs.iter().map(|&p| g.log(p)).collect();
    let mut total: Option<NodeId> = None;
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let d = g.sub(logs[i], logs[j])?;
            let w = g.mul(probs[i], d)?;
            let s = g.sum(w);
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
    }
    let total = total.expect("k >= 2");
    Ok(g.scale(total, 1.0 / (k as f64 * n)))
}

#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: NodeId,
    pub cross_entropy: NodeId,
    pub cooperation: Option<NodeId>,
}

/// `CE(forward) + penalty + gamma * ec_loss(per-learner predictions)`.
///
/// The cooperation term is only built for feature ensembles with at least
/// two learners and nonzero `gamma`; with `gamma == 0` or no penalty the
/// result is exactly the cross-entropy node (plus the penalty).
#[allow(clippy::too_many_arguments)]
pub fn coscl_objective(
    g: &mut Graph,
    model: &EnsembleModel,
    bound: &BoundEnsemble,
    x: NodeId,
    labels: &[usize],
    task: usize,
    penalty: Option<NodeId>,
    gamma: f64,
    phase: Phase,
) -> Result<Objective> {
    if labels.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let (logits, cooperation) = match model.mode {
        Architecture::FeatureEnsemble => {
            model.check_task(task)?;
            let feats = model.all_features(g, bound, x, phase)?;
            let gated = model.gate_features(g, bound, &feats, task)?;
            let sum = EnsembleModel::ensemble_feature(g, &gated)?;
            let logits = bound.heads[task].forward(g, sum)?;
            let ec = if gamma != 0.0 && model.k() >= 2 {
                let probs = EnsembleModel::per_learner_probs(g, bound, &gated, task)?;
                Some(ec_loss(g, &probs)?)
            } else {
                None
            };
            (logits, ec)
        }
        _ => (model.forward_single(g, bound, x, task, phase)?, None),
    };
    let ce = g.softmax_cross_entropy(logits, labels)?;
    let mut total = ce;
    if let Some(p) = penalty {
        total = g.add(total, p)?;
    }
    if let Some(ec) = cooperation {
        let w = g.scale(ec, gamma);
        total = g.add(total, w)?;
    }
    Ok(Objective {
        total,
        cross_entropy: ce,
        cooperation,
    })
}

/// Averages the softmax outputs of independently trained models.
pub fn forward_classifier_ensemble(models: &[EnsembleModel], x: &Tensor, task: usize) -> Result<Tensor> {
    if models.is_empty() {
        return Err(Error::Contract("classifier ensemble with no members".into()));
    }
    let mut acc: Option<Vec<f64>> = None;
    let mut shape = Vec::new();
    for m in models {
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let xi = g.constant(x);
        let z = m.logits(&mut g, &b, xi, task, Phase::Eval)?;
        let p = g.softmax_rows(z)?;
        let v = g.value(p);
        match &mut acc {
            None => {
                shape = v.shape().to_vec();
                acc = Some(v.data().to_vec());
            }
            Some(a) => {
                if v.shape() != shape.as_slice() {
                    return Err(Error::dim("classifier ensemble", &shape, v.shape()));
                }
                a.iter_mut().zip(v.data()).for_each(|(s, &q)| *s += q);
            }
        }
    }
    let n = models.len() as f64;
    let data = acc.expect("nonempty").into_iter().map(|s| s / n).collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::eval_logits;

    fn cfg(k: usize) -> EnsembleConfig {
        EnsembleConfig {
            k,
            learner: LearnerConfig {
                input_dim: 3,
                hidden_widths: vec![5],
                feature_dim: 4,
                dropout_rate: 0.0,
                init_seed: 11,
            },
            ..EnsembleConfig::default()
        }
    }

    fn x() -> Tensor {
        Tensor::from_rows(&[vec![0.3, -1.0, 0.5], vec![1.2, 0.1, -0.7]]).unwrap()
    }

    #[test]
    fn unknown_task() {
        let m = EnsembleModel::new(&cfg(2), &[2, 3]).unwrap();
        assert!(matches!(eval_logits(&m, &x(), 2), Err(Error::UnknownTask(2))));
    }

    #[test]
    fn single_learner_reduction() {
        let mut c = cfg(1);
        c.use_gates = false;
        let fe = EnsembleModel::new(&c, &[3]).unwrap();
        let single = EnsembleModel::new(&EnsembleConfig::single(c.learner.clone()), &[3]).unwrap();
        assert_eq!(fe.learners, single.learners);
        assert_eq!(eval_logits(&fe, &x(), 0).unwrap(), eval_logits(&single, &x(), 0).unwrap());
    }

    #[test]
    fn saturated_gates_approach_ungated() {
        let c = cfg(3);
        let mut gated = EnsembleModel::new(&c, &[2]).unwrap();
        for a in gated.alphas[0].iter_mut() {
            a.data_mut()[0] = 20.0 / c.gate_scale;
        }
        let mut ungated = gated.clone();
        ungated.use_gates = false;
        ungated.alphas.clear();
        let (a, b) = (eval_logits(&gated, &x(), 0).unwrap(), eval_logits(&ungated, &x(), 0).unwrap());
        let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-3, "{diff}");
    }

    #[test]
    fn zero_features_give_head_bias() {
        let mut m = EnsembleModel::new(&cfg(2), &[2]).unwrap();
        m.heads[0].bias = Tensor::new(vec![2], vec![0.25, -1.5]).unwrap();
        let z = eval_logits(&m, &Tensor::zeros(&[2, 3]), 0).unwrap();
        assert_eq!(z.data(), &[0.25, -1.5, 0.25, -1.5]);
    }

    #[test]
    fn gates_strictly_inside_unit_interval() {
        let mut m = EnsembleModel::new(&cfg(3), &[2]).unwrap();
        m.alphas[0][0].data_mut()[0] = 1e6;
        m.alphas[0][1].data_mut()[0] = -1e6;
        m.alphas[0][2].data_mut()[0] = 0.1;
        let gs = m.gates(0).unwrap();
        assert!(gs.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!((1.0 - gs[2]) < 1e-4);
        m.alphas[0][2].data_mut()[0] = -0.1;
        assert!(m.gates(0).unwrap()[2] < 1e-4);
    }

    #[test]
    fn identical_learners_identical_predictions() {
        let mut m = EnsembleModel::new(&cfg(3), &[2]).unwrap();
        let l0 = m.learners[0].clone();
        for l in m.learners.iter_mut() {
            *l = l0.clone();
        }
        let ps = m.per_learner_probs_eval(&x(), 0).unwrap();
        for p in &ps[1..] {
            assert_eq!(p, &ps[0]);
        }
        for p in &ps {
            for r in 0..p.rows() {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ec_worked_example() {
        let mut g = Graph::new();
        let p1 = g.constant(&Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
        let p2 = g.constant(&Tensor::from_rows(&[vec![0.25, 0.75]]).unwrap());
        let l = ec_loss(&mut g, &[p1, p2]).unwrap();
        assert!((g.value(l).data()[0] - 0.137326).abs() < 1e-6);
        let z = ec_loss(&mut g, &[p1]).unwrap();
        assert_eq!(g.value(z).data(), &[0.0]);
        let same = ec_loss(&mut g, &[p1, p1, p1]).unwrap();
        assert_eq!(g.value(same).data(), &[0.0]);
    }

    #[test]
    fn ec_shape_mismatch() {
        let mut g = Graph::new();
        let p1 = g.constant(&Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
        let p2 = g.constant(&Tensor::from_rows(&[vec![0.2, 0.3, 0.5]]).unwrap());
        assert!(matches!(ec_loss(&mut g, &[p1, p2]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn classifier_ensemble_means() {
        let a = EnsembleModel::new(&EnsembleConfig::single(cfg(1).learner), &[3]).unwrap();
        let mut lc = cfg(1).learner;
        lc.init_seed = 99;
        let b = EnsembleModel::new(&EnsembleConfig::single(lc), &[3]).unwrap();
        let only = forward_classifier_ensemble(std::slice::from_ref(&a), &x(), 0).unwrap();
        let pa = {
            let mut g = Graph::new();
            let z = g.constant(&eval_logits(&a, &x(), 0).unwrap());
            let p = g.softmax_rows(z).unwrap();
            g.value(p).clone()
        };
        assert_eq!(only, pa);
        let both = forward_classifier_ensemble(&[a.clone(), b.clone()], &x(), 0).unwrap();
        let pb = forward_classifier_ensemble(std::slice::from_ref(&b), &x(), 0).unwrap();
        for i in 0..both.len() {
            assert!((both.data()[i] - (pa.data()[i] + pb.data()[i]) / 2.0).abs() < 1e-15);
        }
        for r in 0..both.rows() {
            assert!((both.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let c = EnsembleModel::new(&EnsembleConfig::single(cfg(1).learner), &[2]).unwrap();
        assert!(forward_classifier_ensemble(&[a, c], &x(), 0).is_err());
    }

    #[test]
    fn objective_gamma_zero_is_cross_entropy() {
        let m = EnsembleModel::new(&cfg(3), &[2]).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let xi = g.constant(&x());
        let o = coscl_objective(&mut g, &m, &b, xi, &[0, 1], 0, None, 0.0, Phase::Eval).unwrap();
        assert_eq!(o.total, o.cross_entropy);
        assert!(o.cooperation.is_none());
    }

    #[test]
    fn objective_identical_learners_ec_zero() {
        let mut m = EnsembleModel::new(&cfg(3), &[2]).unwrap();
        let l0 = m.learners[0].clone();
        m.learners.iter_mut().for_each(|l| *l = l0.clone());
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let xi = g.constant(&x());
        let o = coscl_objective(&mut g, &m, &b, xi, &[0, 1], 0, None, 0.02, Phase::Eval).unwrap();
        assert_eq!(g.value(o.cooperation.unwrap()).data(), &[0.0]);
        assert_eq!(g.value(o.total).data(), g.value(o.cross_entropy).data());
    }

    #[test]
    fn rescaled_gates_keep_argmax() {
        // Scale every gate by c and divide head weights by c: the ensemble
        // feature shrinks by c, the head compensates exactly up to rounding.
        let mut m = EnsembleModel::new(&cfg(3), &[3]).unwrap();
        let alphas = [0.004, -0.002, 0.01];
        for (a, &v) in m.alphas[0].iter_mut().zip(&alphas) {
            a.data_mut()[0] = v;
        }
        let gates = m.gates(0).unwrap();
        let c = 0.5;
        let mut r = m.clone();
        for (a, &gv) in r.alphas[0].iter_mut().zip(&gates) {
            let target: f64 = c * gv;
            a.data_mut()[0] = (target / (1.0 - target)).ln() / r.gate_scale;
        }
        r.heads[0].weight.data_mut().iter_mut().for_each(|w| *w /= c);
        let xs = Tensor::from_rows(&[
            vec![0.3, -1.0, 0.5],
            vec![1.2, 0.1, -0.7],
            vec![-2.0, 0.4, 0.9],
        ])
        .unwrap();
        let (a, b) = (eval_logits(&m, &xs, 0).unwrap(), eval_logits(&r, &xs, 0).unwrap());
        for row in 0..3 {
            assert_eq!(crate::model::argmax(a.row(row)), crate::model::argmax(b.row(row)));
            for (p, q) in a.row(row).iter().zip(b.row(row)) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }
}
