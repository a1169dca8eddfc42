//! Experiment configuration: a sectioned key-value text file (TOML) and its
//! canonical hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{Architecture, EnsembleConfig};
use crate::error::{Error, Result};
use crate::learner::{budget_match, LearnerConfig};
use crate::strategy::StrategyConfig;
use crate::stream::{CsvSchema, StreamSpec};
use crate::train::TrainConfig;

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "COSCL_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSource {
    pub path: PathBuf,
    #[serde(flatten)]
    pub schema: CsvSchema,
    #[serde(default)]
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamSection {
    #[serde(flatten)]
    pub spec: StreamSpec,
    /// When present, tasks are read from this file instead of generated.
    pub csv: Option<CsvSource>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    /// Parameter budget for the whole model: learners, gates and heads.
    /// When set, learner widths are rescaled from the template to fit.
    pub total: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub output_dir: PathBuf,
    /// Train each task alone from scratch to measure forward transfer.
    pub baseline: bool,
    pub checkpoints: bool,
    pub shuffle_tasks: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seeds: vec![1],
            workers: 1,
            output_dir: PathBuf::from("results"),
            baseline: true,
            checkpoints: true,
            shuffle_tasks: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub hdiv: bool,
    pub flatness: bool,
    pub diversity: bool,
    pub flatness_directions: usize,
    pub flatness_radii: Vec<f64>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            hdiv: false,
            flatness: false,
            diversity: false,
            flatness_directions: crate::diagnostics::DEFAULT_DIRECTIONS,
            flatness_radii: vec![0.0, 0.25, 0.5, 1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub stream: StreamSection,
    pub ensemble: EnsembleConfig,
    pub budget: BudgetSection,
    pub strategy: StrategyConfig,
    pub train: TrainConfig,
    pub run: RunSection,
    pub probes: ProbeSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            stream: StreamSection::default(),
            ensemble: EnsembleConfig::default(),
            budget: BudgetSection::default(),
            strategy: StrategyConfig::None,
            train: TrainConfig::default(),
            run: RunSection::default(),
            probes: ProbeSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format {
            what: "config".into(),
            msg: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid experiment name {:?}", self.name)));
        }
        if self.stream.csv.is_none() {
            self.stream.spec.validate()?;
        }
        self.ensemble.validate()?;
        self.strategy.validate()?;
        self.train.validate()?;
        if self.probes.flatness_directions == 0 || self.probes.flatness_radii.is_empty() {
            return Err(Error::Config("flatness probe needs directions and radii".into()));
        }
        Ok(())
    }

    /// Learner shape for the given input width and task heads. With a
    /// budget, widths are the largest budget-matched ones whose whole model
    /// (learners, gates and heads) fits in `budget.total`.
    pub fn learner(&self, input_dim: usize, head_dims: &[usize]) -> Result<LearnerConfig> {
        let template = LearnerConfig {
            input_dim,
            ..self.ensemble.learner.clone()
        };
        let Some(total) = self.budget.total else {
            return Ok(template);
        };
        let k = match self.ensemble.architecture {
            Architecture::Single => 1,
            _ => self.ensemble.k,
        };
        // Learner budgets that are infeasible or fit count as "not too big";
        // the predicate is monotone, so bisect for its last true point.
        let not_too_big = |b: usize| match budget_match(b, k, &template) {
            Ok(l) => model_parameter_count(&self.ensemble, &l, head_dims) <= total,
            Err(_) => true,
        };
        let (mut lo, mut hi) = (0usize, total);
        if not_too_big(hi) {
            lo = hi;
        }
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if not_too_big(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        budget_match(lo, k, &template)
            .map_err(|_| Error::Config(format!("a parameter budget of {total} cannot fit {k} learner(s) and their heads")))
    }

    /// Output directory, relocated under the output-root variable when it
    /// is relative.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.run.output_dir.is_relative() => PathBuf::from(root).join(&self.run.output_dir),
            _ => self.run.output_dir.clone(),
        }
    }

    /// One `key = value` line per leaf, keys dotted and sorted.
    pub fn canonical_text(&self) -> Result<String> {
        let value = toml::Value::try_from(self).map_err(|e| Error::Format {
            what: "config".into(),
            msg: e.to_string(),
        })?;
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.sort();
        Ok(lines.join("\n") + "\n")
    }

    /// Hex SHA-256 of [`canonical_text`](Self::canonical_text).
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.canonical_text()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Parameter count of a model with the given learner shape, before
/// training. Matches the built model exactly.
pub fn model_parameter_count(ens: &EnsembleConfig, learner: &LearnerConfig, head_dims: &[usize]) -> usize {
    let heads: usize = head_dims.iter().map(|&c| learner.feature_dim * c + c).sum();
    let l = learner.parameter_count();
    match ens.architecture {
        Architecture::Single => l + heads,
        Architecture::ClassifierEnsemble => ens.k * (l + heads),
        Architecture::FeatureEnsemble => {
            let gates = if ens.use_gates { ens.k * head_dims.len() } else { 0 };
            ens.k * l + heads + gates
        }
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        toml::Value::Array(items) if items.iter().any(|i| i.is_table()) => {
            for (i, child) in items.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), child, out);
            }
        }
        leaf => out.push(format!("{prefix} = {}", leaf.to_string().trim())),
    }
}
