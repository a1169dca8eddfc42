//! Experiment runner: per-seed training over a task stream, aggregation,
//! persistence, sweeps and plot-data tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::diagnostics::{
    acc_metrics, diversity_matrix, flatness_probe, hdiv_probe, AccuracyMatrix, DivergenceProbeResult,
    FlatnessResult, HdivConfig, Metrics,
};
use crate::ensemble::{Architecture, EnsembleConfig};
use crate::error::{Error, Result};
use crate::model::{accuracy_from_scores, Model};
use crate::rng;
use crate::stream::{generate, ingest_csv, reorder, shuffled_order, Batch, Task};
use crate::tensor::Tensor;
use crate::train::ContinualSystem;

/// Largest relative parameter-count gap accepted between paired runs.
pub const BUDGET_TOLERANCE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdivEntry {
    pub task_a: usize,
    pub task_b: usize,
    pub result: DivergenceProbeResult,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProbeOutputs {
    pub hdiv: Vec<HdivEntry>,
    pub flatness: Option<FlatnessResult>,
    /// `[learner][task]` relative accuracies.
    pub diversity: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SeedOutcome {
    Ok {
        accuracy: AccuracyMatrix,
        metrics: Metrics,
        probes: ProbeOutputs,
    },
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    /// `task_order[i]` is the original index of the `i`-th task trained.
    pub task_order: Vec<usize>,
    #[serde(flatten)]
    pub outcome: SeedOutcome,
}

impl SeedRecord {
    pub fn metrics(&self) -> Option<&Metrics> {
        match &self.outcome {
            SeedOutcome::Ok { metrics, .. } => Some(metrics),
            SeedOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Stat { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub completed: usize,
    pub failed: usize,
    /// Set when some seeds failed; statistics then cover the rest only.
    pub partial: bool,
    pub aac: Option<Stat>,
    pub bwt: Option<Stat>,
    pub fwt: Option<Stat>,
}

impl Aggregate {
    pub fn from_seeds(seeds: &[SeedRecord]) -> Self {
        let ok: Vec<&Metrics> = seeds.iter().filter_map(SeedRecord::metrics).collect();
        let failed = seeds.len() - ok.len();
        let fwt: Vec<f64> = ok.iter().filter_map(|m| m.fwt).collect();
        Aggregate {
            completed: ok.len(),
            failed,
            partial: failed > 0,
            aac: Stat::of(&ok.iter().map(|m| m.aac).collect::<Vec<_>>()),
            bwt: Stat::of(&ok.iter().map(|m| m.bwt).collect::<Vec<_>>()),
            fwt: if fwt.len() == ok.len() { Stat::of(&fwt) } else { None },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// Learner widths actually used after budget matching.
    pub hidden_widths: Vec<usize>,
    pub feature_dim: usize,
    pub learner_parameters: usize,
    pub total_parameters: usize,
    pub seeds: Vec<SeedRecord>,
    pub aggregate: Aggregate,
}

impl RunRecord {
    pub fn aac(&self) -> Vec<f64> {
        self.seeds.iter().filter_map(|s| s.metrics().map(|m| m.aac)).collect()
    }
}

/// Saved state at a task boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub task_order: Vec<usize>,
    pub tasks_completed: usize,
    pub system: ContinualSystem,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if !self.system.parameters().iter().all(|t| t.is_finite()) {
            return Err(Error::Contract("refusing to checkpoint non-finite parameters".into()));
        }
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: path.display().to_string(),
            msg: e.to_string(),
        })?;
        for t in ck.system.parameters() {
            if t.len() != t.shape().iter().product::<usize>() {
                return Err(Error::Format {
                    what: path.display().to_string(),
                    msg: format!("tensor of shape {:?} holds {} values", t.shape(), t.len()),
                });
            }
        }
        Ok(ck)
    }

    /// The task stream in the order it was trained.
    pub fn tasks(&self) -> Result<Vec<Task>> {
        reorder(&load_stream(&self.config)?, &self.task_order)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        what: path.display().to_string(),
        msg: e.to_string(),
    })?;
    write_text(path, &(text + "\n"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_stream(cfg: &ExperimentConfig) -> Result<Vec<Task>> {
    match &cfg.stream.csv {
        Some(csv) => ingest_csv(&csv.path, &csv.schema, csv.split_seed),
        None => generate(&cfg.stream.spec),
    }
}

/// Ensemble configuration for one seed: budget-matched widths, the stream's
/// input width and a seed-specific initialization.
pub fn seed_ensemble(cfg: &ExperimentConfig, input_dim: usize, head_dims: &[usize], seed: u64) -> Result<EnsembleConfig> {
    let mut learner = cfg.learner(input_dim, head_dims)?;
    learner.init_seed = rng::derive(cfg.ensemble.learner.init_seed, &[rng::TAG_INIT, seed]);
    Ok(EnsembleConfig {
        learner,
        ..cfg.ensemble.clone()
    })
}

fn head_dims(tasks: &[Task]) -> Vec<usize> {
    tasks.iter().map(Task::num_classes).collect()
}

fn input_dim(tasks: &[Task]) -> Result<usize> {
    let d = tasks.first().map_or(0, Task::input_dim);
    if d == 0 || tasks.iter().any(|t| t.input_dim() != d) {
        return Err(Error::Config("tasks must share a nonzero input width".into()));
    }
    Ok(d)
}

/// Builds the untrained system for a config, for parameter accounting.
pub fn build_system(cfg: &ExperimentConfig, tasks: &[Task], seed: u64) -> Result<ContinualSystem> {
    let ens = seed_ensemble(cfg, input_dim(tasks)?, &head_dims(tasks), seed)?;
    ContinualSystem::new(&ens, &cfg.strategy, &head_dims(tasks))
}

pub fn parameter_count(cfg: &ExperimentConfig) -> Result<usize> {
    let tasks = load_stream(cfg)?;
    Ok(build_system(cfg, &tasks, cfg.run.seeds[0])?.parameter_count())
}

/// Checks that two configs have total parameter counts within
/// [`BUDGET_TOLERANCE`] of the second (the reference).
pub fn check_budget_parity(a: &ExperimentConfig, reference: &ExperimentConfig) -> Result<(usize, usize)> {
    let pa = parameter_count(a)?;
    let pr = parameter_count(reference)?;
    let gap = (pa as f64 - pr as f64).abs() / pr as f64;
    if gap > BUDGET_TOLERANCE {
        return Err(Error::Config(format!(
            "parameter budgets differ by {:.1}% ({pa} vs {pr})",
            gap * 100.0
        )));
    }
    Ok((pa, pr))
}

fn test_sets(tasks: &[Task]) -> Result<Vec<(usize, Batch)>> {
    tasks.iter().map(|t| Ok((t.id, t.test_batch()?))).collect()
}

fn run_seed(cfg: &ExperimentConfig, stream: &[Task], seed: u64, ckpt_dir: Option<&Path>) -> Result<SeedRecord> {
    let n = stream.len();
    let order = if cfg.run.shuffle_tasks {
        shuffled_order(n, rng::derive(seed, &[rng::TAG_ORDER]))
    } else {
        (0..n).collect()
    };
    let tasks = reorder(stream, &order)?;
    let tests = test_sets(&tasks)?;
    let mut sys = build_system(cfg, &tasks, seed)?;
    let mut acc = AccuracyMatrix::new(n);
    let mut steps = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        sys.train_task(task, &cfg.train, seed, &mut steps)?;
        sys.consolidate(task, seed)?;
        for (i, (id, b)) in tests.iter().enumerate() {
            acc.set(t, i, sys.accuracy(b, *id)?)?;
        }
        if let Some(dir) = ckpt_dir {
            Checkpoint {
                config: cfg.clone(),
                seed,
                task_order: order.clone(),
                tasks_completed: t + 1,
                system: sys.clone(),
            }
            .save(&checkpoint_path(dir, seed, t + 1))?;
        }
    }
    if cfg.run.baseline {
        let mut base = Vec::with_capacity(n);
        for (task, (id, b)) in tasks.iter().zip(&tests) {
            let mut fresh = build_system(cfg, &tasks, seed)?;
            fresh.train_task(task, &cfg.train, seed, &mut Vec::new())?;
            base.push(fresh.accuracy(b, *id)?);
        }
        acc.baseline = Some(base);
    }
    let metrics = acc_metrics(&acc)?;
    let probes = run_probes(cfg, &sys, &tests, seed)?;
    Ok(SeedRecord {
        seed,
        task_order: order,
        outcome: SeedOutcome::Ok {
            accuracy: acc,
            metrics,
            probes,
        },
    })
}

pub fn checkpoint_path(dir: &Path, seed: u64, tasks_completed: usize) -> PathBuf {
    dir.join(format!("seed-{seed}")).join(format!("task-{tasks_completed:03}.json"))
}

/// Head-input features of every member, concatenated column-wise.
fn system_features(sys: &ContinualSystem, x: &Tensor, task: usize) -> Result<Tensor> {
    let parts = sys
        .members
        .iter()
        .map(|m| m.ensemble_feature_eval(x, task))
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        return Ok(parts.into_iter().next().expect("one part"));
    }
    let rows: Vec<Vec<f64>> = (0..x.rows())
        .map(|r| parts.iter().flat_map(|p| p.row(r).iter().copied()).collect())
        .collect();
    Tensor::from_rows(&rows)
}

pub fn probe_hdiv(sys: &ContinualSystem, tests: &[(usize, Batch)], seed: u64) -> Result<Vec<HdivEntry>> {
    let feats = tests
        .iter()
        .map(|(id, b)| system_features(sys, &b.x, *id))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for i in 0..feats.len() {
        for j in i + 1..feats.len() {
            let s = rng::derive(seed, &[rng::TAG_PROBE, i as u64, j as u64]);
            out.push(HdivEntry {
                task_a: tests[i].0,
                task_b: tests[j].0,
                result: hdiv_probe(&feats[i], &feats[j], s, &HdivConfig::default())?,
            });
        }
    }
    Ok(out)
}

/// Relative accuracies of the ensemble's learners, or of the members of a
/// classifier ensemble.
pub fn probe_diversity(sys: &ContinualSystem, tests: &[(usize, Batch)]) -> Result<Vec<Vec<f64>>> {
    if sys.architecture != Architecture::ClassifierEnsemble {
        return diversity_matrix(&sys.members[0], tests);
    }
    let k = sys.members.len();
    let mut out = vec![vec![0.0; tests.len()]; k];
    for (col, (id, b)) in tests.iter().enumerate() {
        let accs = sys
            .members
            .iter()
            .map(|m| Ok(accuracy_from_scores(&crate::model::eval_logits(m, &b.x, *id)?, &b.y)))
            .collect::<Result<Vec<f64>>>()?;
        let mean = accs.iter().sum::<f64>() / k as f64;
        for (i, a) in accs.iter().enumerate() {
            out[i][col] = a - mean;
        }
    }
    Ok(out)
}

fn run_probes(cfg: &ExperimentConfig, sys: &ContinualSystem, tests: &[(usize, Batch)], seed: u64) -> Result<ProbeOutputs> {
    let p = &cfg.probes;
    Ok(ProbeOutputs {
        hdiv: if p.hdiv { probe_hdiv(sys, tests, seed)? } else { Vec::new() },
        flatness: if p.flatness {
            Some(flatness_probe(sys, tests, p.flatness_directions, &p.flatness_radii, seed)?)
        } else {
            None
        },
        diversity: if p.diversity { Some(probe_diversity(sys, tests)?) } else { None },
    })
}

/// Trains every seed without touching the filesystem, except for
/// checkpoints when `ckpt_dir` is given. Seeds run on `cfg.run.workers`
/// threads; results are independent of the worker count.
pub fn run_seeds(cfg: &ExperimentConfig, ckpt_dir: Option<&Path>) -> Result<RunRecord> {
    cfg.validate()?;
    let stream = load_stream(cfg)?;
    let template = build_system(cfg, &stream, cfg.run.seeds[0])?;
    let learner = cfg.learner(input_dim(&stream)?, &head_dims(&stream))?;
    let one = |&seed: &u64| match run_seed(cfg, &stream, seed, ckpt_dir) {
        Ok(r) => r,
        Err(e) => SeedRecord {
            seed,
            task_order: Vec::new(),
            outcome: SeedOutcome::Failed { error: e.to_string() },
        },
    };
    let seeds: Vec<SeedRecord> = if cfg.run.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start workers: {e}")))?;
        pool.install(|| cfg.run.seeds.par_iter().map(one).collect())
    } else {
        cfg.run.seeds.iter().map(one).collect()
    };
    let aggregate = Aggregate::from_seeds(&seeds);
    Ok(RunRecord {
        config_hash: cfg.hash()?,
        config: cfg.clone(),
        hidden_widths: learner.hidden_widths.clone(),
        feature_dim: learner.feature_dim,
        learner_parameters: template.members.iter().map(|m| m.learner_parameter_count()).sum(),
        total_parameters: template.parameter_count(),
        seeds,
        aggregate,
    })
}

/// Directory holding one run's outputs.
pub fn run_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    Ok(cfg.output_dir().join(format!("{}-{}", cfg.name, &cfg.hash()?[..12])))
}

/// Runs the experiment and writes `summary.json`, CSV tables, checkpoints
/// and a wall-clock log into [`run_dir`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(RunRecord, PathBuf)> {
    cfg.validate()?;
    let dir = run_dir(cfg)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let start = Instant::now();
    let ckpt = cfg.run.checkpoints.then(|| dir.join("checkpoints"));
    let record = run_seeds(cfg, ckpt.as_deref())?;
    write_record(&record, &dir)?;
    write_text(
        &dir.join("timing.log"),
        &format!("wall_clock_seconds {:.3}\n", start.elapsed().as_secs_f64()),
    )?;
    Ok((record, dir))
}

pub fn write_record(record: &RunRecord, dir: &Path) -> Result<()> {
    write_json(&dir.join("summary.json"), record)?;
    write_text(&dir.join("config.toml"), &record.config.to_toml()?)?;
    write_text(&dir.join("accuracy.csv"), &accuracy_table(record))?;
    write_text(&dir.join("metrics.csv"), &metrics_table(record))?;
    let p = &record.config.probes;
    if p.hdiv {
        write_text(&dir.join("hdiv.csv"), &hdiv_table(record))?;
    }
    if p.flatness {
        write_text(&dir.join("flatness.csv"), &flatness_table(record))?;
    }
    if p.diversity {
        write_text(&dir.join("diversity.csv"), &diversity_table(record))?;
    }
    Ok(())
}

pub fn read_record(path: &Path) -> Result<RunRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        what: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn ok_seeds(record: &RunRecord) -> impl Iterator<Item = (&SeedRecord, &AccuracyMatrix, &ProbeOutputs)> {
    record.seeds.iter().filter_map(|s| match &s.outcome {
        SeedOutcome::Ok { accuracy, probes, .. } => Some((s, accuracy, probes)),
        SeedOutcome::Failed { .. } => None,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn accuracy_table(r: &RunRecord) -> String {
    let mut s = String::from("seed,after_task,task,original_task,accuracy\n");
    for (seed, acc, _) in ok_seeds(r) {
        for (t, row) in acc.a.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                let _ = writeln!(s, "{},{t},{i},{},{}", seed.seed, seed.task_order[i], opt(*v));
            }
        }
    }
    s
}

fn metrics_table(r: &RunRecord) -> String {
    let mut s = String::from("seed,status,aac,bwt,fwt\n");
    for seed in &r.seeds {
        match seed.metrics() {
            Some(m) => {
                let _ = writeln!(s, "{},ok,{},{},{}", seed.seed, m.aac, m.bwt, opt(m.fwt));
            }
            None => {
                let _ = writeln!(s, "{},failed,,,", seed.seed);
            }
        }
    }
    s
}

fn hdiv_table(r: &RunRecord) -> String {
    let mut s = String::from("seed,task_a,task_b,test_loss,test_error,divergence\n");
    for (seed, _, p) in ok_seeds(r) {
        for e in &p.hdiv {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                seed.seed, e.task_a, e.task_b, e.result.test_loss, e.result.test_error, e.result.divergence
            );
        }
    }
    s
}

fn flatness_table(r: &RunRecord) -> String {
    let mut s = String::from("seed,direction,radius,loss\n");
    for (seed, _, p) in ok_seeds(r) {
        if let Some(f) = &p.flatness {
            for (d, curve) in f.curves.iter().enumerate() {
                for (radius, loss) in f.radii.iter().zip(curve) {
                    let _ = writeln!(s, "{},{d},{radius},{loss}", seed.seed);
                }
            }
        }
    }
    s
}

fn flatness_envelope_table(r: &RunRecord) -> String {
    let mut s = String::from("seed,radius,envelope\n");
    for (seed, _, p) in ok_seeds(r) {
        if let Some(f) = &p.flatness {
            for (radius, e) in f.radii.iter().zip(&f.envelope) {
                let _ = writeln!(s, "{},{radius},{e}", seed.seed);
            }
        }
    }
    s
}

fn diversity_table(r: &RunRecord) -> String {
    let mut s = String::from("seed,learner,task,relative_accuracy\n");
    for (seed, _, p) in ok_seeds(r) {
        if let Some(d) = &p.diversity {
            for (i, row) in d.iter().enumerate() {
                for (t, v) in row.iter().enumerate() {
                    let _ = writeln!(s, "{},{i},{t},{v}", seed.seed);
                }
            }
        }
    }
    s
}

/// Mean over seeds of the average accuracy on tasks seen so far, one row
/// per task boundary.
fn curve_table(r: &RunRecord) -> String {
    let mut s = String::from("after_task,mean_accuracy,std_accuracy,seeds\n");
    let seeds: Vec<&AccuracyMatrix> = ok_seeds(r).map(|(_, a, _)| a).collect();
    let t = seeds.first().map_or(0, |a| a.tasks());
    for after in 0..t {
        let vals: Vec<f64> = seeds.iter().filter_map(|a| a.seen_average(after).ok()).collect();
        if let Some(st) = Stat::of(&vals) {
            let _ = writeln!(s, "{after},{},{},{}", st.mean, st.std, vals.len());
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    KVsWidth,
    Gamma,
    GateScale,
    TotalBudget,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "k_vs_width" | "k" => Ok(SweepAxis::KVsWidth),
            "gamma" => Ok(SweepAxis::Gamma),
            "gate_scale" | "s" => Ok(SweepAxis::GateScale),
            "total_budget" | "budget" => Ok(SweepAxis::TotalBudget),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::KVsWidth => "k_vs_width",
            SweepAxis::Gamma => "gamma",
            SweepAxis::GateScale => "gate_scale",
            SweepAxis::TotalBudget => "total_budget",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: SweepAxis,
    pub value: f64,
    /// `coscl` or `scl` for budget sweeps, `base` otherwise.
    pub variant: String,
    pub record: Option<RunRecord>,
    /// Why the point was not run.
    pub skipped: Option<String>,
}

fn integral(axis: SweepAxis, v: f64) -> Result<usize> {
    if v.fract() != 0.0 || !(1.0..=1e12).contains(&v) {
        return Err(Error::Config(format!("{} needs positive integers, got {v}", axis.name())));
    }
    Ok(v as usize)
}

/// Parameter budget of a config: the explicit total or the size of the
/// model its template builds.
pub fn budget_of(cfg: &ExperimentConfig) -> Result<usize> {
    match cfg.budget.total {
        Some(b) => Ok(b),
        None => parameter_count(cfg),
    }
}

/// The single-learner counterpart of a config at the same budget.
pub fn scl_variant(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut s = cfg.clone();
    s.ensemble = EnsembleConfig {
        gate_scale: cfg.ensemble.gate_scale,
        ..EnsembleConfig::single(cfg.ensemble.learner.clone())
    };
    s.name = format!("{}-scl", cfg.name);
    s
}

/// One sweep point: grid value, variant name, and the config or the reason
/// it is infeasible.
pub type SweepEntry = (f64, String, std::result::Result<ExperimentConfig, String>);

/// Grid variants of `base` along `axis`.
pub fn sweep_configs(
    base: &ExperimentConfig,
    axis: SweepAxis,
    grid: &[f64],
) -> Result<Vec<SweepEntry>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    base.validate()?;
    let budget = match axis {
        SweepAxis::KVsWidth => Some(budget_of(base)?),
        _ => None,
    };
    let mut out = Vec::new();
    for &v in grid {
        let tag = |c: &mut ExperimentConfig, variant: &str| {
            c.name = format!("{}-{}-{v}-{variant}", base.name, axis.name());
        };
        match axis {
            SweepAxis::KVsWidth => {
                let mut c = base.clone();
                let k = integral(axis, v)?;
                c.ensemble.k = k;
                if k == 1 {
                    c.ensemble.architecture = Architecture::Single;
                    c.ensemble.use_gates = false;
                } else if c.ensemble.architecture == Architecture::Single {
                    c.ensemble.architecture = Architecture::FeatureEnsemble;
                }
                c.budget.total = budget;
                tag(&mut c, "base");
                let checked = feasible(c);
                out.push((v, "base".into(), checked));
            }
            SweepAxis::Gamma | SweepAxis::GateScale => {
                let mut c = base.clone();
                if axis == SweepAxis::Gamma {
                    c.ensemble.gamma = v;
                } else {
                    c.ensemble.gate_scale = v;
                }
                tag(&mut c, "base");
                out.push((v, "base".into(), feasible(c)));
            }
            SweepAxis::TotalBudget => {
                let b = integral(axis, v)?;
                let mut co = base.clone();
                co.budget.total = Some(b);
                let mut scl = scl_variant(&co);
                tag(&mut co, "coscl");
                tag(&mut scl, "scl");
                let pair = feasible(co.clone()).and_then(|co| {
                    let scl = feasible(scl)?;
                    check_budget_parity(&co, &scl).map_err(|e| e.to_string())?;
                    Ok((co, scl))
                });
                match pair {
                    Ok((co, scl)) => {
                        out.push((v, "coscl".into(), Ok(co)));
                        out.push((v, "scl".into(), Ok(scl)));
                    }
                    Err(e) => {
                        out.push((v, "coscl".into(), Err(e.clone())));
                        out.push((v, "scl".into(), Err(e)));
                    }
                }
            }
        }
    }
    Ok(out)
}

fn feasible(c: ExperimentConfig) -> std::result::Result<ExperimentConfig, String> {
    c.validate().map_err(|e| e.to_string())?;
    let stream = load_stream(&c).map_err(|e| e.to_string())?;
    build_system(&c, &stream, c.run.seeds[0]).map_err(|e| e.to_string())?;
    Ok(c)
}

/// Runs every feasible grid point and writes `sweep.json` and `sweep.csv`
/// under `<output_dir>/<name>-sweep-<axis>/`.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, grid: &[f64]) -> Result<(Vec<SweepPoint>, PathBuf)> {
    let mut points = Vec::new();
    for (value, variant, cfg) in sweep_configs(base, axis, grid)? {
        let point = match cfg {
            Ok(c) => SweepPoint {
                axis,
                value,
                variant,
                record: Some(run_experiment(&c)?.0),
                skipped: None,
            },
            Err(reason) => SweepPoint {
                axis,
                value,
                variant,
                record: None,
                skipped: Some(reason),
            },
        };
        points.push(point);
    }
    let dir = base.output_dir().join(format!("{}-sweep-{}", base.name, axis.name()));
    write_json(&dir.join("sweep.json"), &points)?;
    write_text(&dir.join("sweep.csv"), &sweep_table(&points))?;
    Ok((points, dir))
}

fn stat_cols(s: Option<Stat>) -> String {
    s.map_or_else(|| ",".into(), |s| format!("{},{}", s.mean, s.std))
}

fn sweep_table(points: &[SweepPoint]) -> String {
    let mut s = String::from(
        "axis,value,variant,status,k,hidden_widths,feature_dim,total_parameters,aac_mean,aac_std,bwt_mean,bwt_std,fwt_mean,fwt_std\n",
    );
    for p in points {
        let axis = p.axis.name();
        match &p.record {
            Some(r) => {
                let widths = r.hidden_widths.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
                let status = if r.aggregate.partial { "partial" } else { "ok" };
                let _ = writeln!(
                    s,
                    "{axis},{},{},{status},{},{widths},{},{},{},{},{}",
                    p.value,
                    p.variant,
                    r.config.ensemble.k,
                    r.feature_dim,
                    r.total_parameters,
                    stat_cols(r.aggregate.aac),
                    stat_cols(r.aggregate.bwt),
                    stat_cols(r.aggregate.fwt)
                );
            }
            None => {
                let _ = writeln!(s, "{axis},{},{},skipped,,,,,,,,,,", p.value, p.variant);
            }
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Curve,
    Sweep,
    Flatness,
    Diversity,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "curve" => Ok(PlotKind::Curve),
            "sweep" => Ok(PlotKind::Sweep),
            "flatness" => Ok(PlotKind::Flatness),
            "diversity" => Ok(PlotKind::Diversity),
            other => Err(Error::Config(format!("unknown plot kind {other:?}"))),
        }
    }
}

/// Writes plot-ready CSV files for `records` into `out` and returns their
/// paths in a fixed order.
pub fn emit_plotdata(records: &[RunRecord], kind: PlotKind, out: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::Contract("no records to emit".into()));
    }
    let mut files = Vec::new();
    let mut put = |name: String, text: String| -> Result<()> {
        let p = out.join(name);
        write_text(&p, &text)?;
        files.push(p);
        Ok(())
    };
    match kind {
        PlotKind::Curve => {
            for r in records {
                put(format!("curve_{}.csv", r.config.name), curve_table(r))?;
            }
        }
        PlotKind::Flatness => {
            for r in records {
                put(format!("flatness_{}.csv", r.config.name), flatness_table(r))?;
                put(format!("flatness_envelope_{}.csv", r.config.name), flatness_envelope_table(r))?;
            }
        }
        PlotKind::Diversity => {
            for r in records {
                put(format!("diversity_{}.csv", r.config.name), diversity_table(r))?;
            }
        }
        PlotKind::Sweep => {
            let mut s = String::from("name,k,total_parameters,gamma,gate_scale,aac_mean,aac_std,bwt_mean,bwt_std\n");
            for r in records {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    r.config.name,
                    r.config.ensemble.k,
                    r.total_parameters,
                    r.config.ensemble.gamma,
                    r.config.ensemble.gate_scale,
                    stat_cols(r.aggregate.aac),
                    stat_cols(r.aggregate.bwt)
                );
            }
            put("sweep_records.csv".into(), s)?;
        }
    }
    Ok(files)
}

/// Emits from a directory: every `summary.json` below it (sorted by path)
/// for record kinds, or every `sweep.json` table for the sweep kind.
pub fn emit_from_dir(dir: &Path, kind: PlotKind, out: &Path) -> Result<Vec<PathBuf>> {
    let mut summaries = Vec::new();
    let mut sweeps = Vec::new();
    collect(dir, &mut summaries, &mut sweeps)?;
    summaries.sort();
    sweeps.sort();
    if kind == PlotKind::Sweep && !sweeps.is_empty() {
        let mut files = Vec::new();
        for p in sweeps {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let points: Vec<SweepPoint> = serde_json::from_str(&text).map_err(|e| Error::Format {
                what: p.display().to_string(),
                msg: e.to_string(),
            })?;
            let stem = p.parent().and_then(Path::file_name).map_or("sweep".into(), |s| s.to_string_lossy().into_owned());
            let target = out.join(format!("{stem}.csv"));
            write_text(&target, &sweep_table(&points))?;
            files.push(target);
        }
        return Ok(files);
    }
    let records = summaries.iter().map(|p| read_record(p)).collect::<Result<Vec<_>>>()?;
    emit_plotdata(&records, kind, out)
}

fn collect(dir: &Path, summaries: &mut Vec<PathBuf>, sweeps: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            if path.file_name().is_some_and(|n| n == "checkpoints") {
                continue;
            }
            collect(&path, summaries, sweeps)?;
        } else if path.file_name().is_some_and(|n| n == "summary.json") {
            summaries.push(path);
        } else if path.file_name().is_some_and(|n| n == "sweep.json") {
            sweeps.push(path);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    Hdiv,
    Flatness,
    Diversity,
}

impl std::str::FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hdiv" => Ok(ProbeKind::Hdiv),
            "flatness" => Ok(ProbeKind::Flatness),
            "diversity" => Ok(ProbeKind::Diversity),
            other => Err(Error::Config(format!("unknown probe kind {other:?}"))),
        }
    }
}

/// Runs one probe on a checkpoint over the tasks it has been trained on
/// and returns a CSV table.
pub fn probe_checkpoint(ck: &Checkpoint, kind: ProbeKind) -> Result<String> {
    let tasks = ck.tasks()?;
    let seen = &tasks[..ck.tasks_completed.min(tasks.len())];
    let tests = test_sets(seen)?;
    let p = &ck.config.probes;
    let record = |probes: ProbeOutputs| RunRecord {
        config_hash: String::new(),
        config: ck.config.clone(),
        hidden_widths: Vec::new(),
        feature_dim: 0,
        learner_parameters: 0,
        total_parameters: 0,
        seeds: vec![SeedRecord {
            seed: ck.seed,
            task_order: ck.task_order.clone(),
            outcome: SeedOutcome::Ok {
                accuracy: AccuracyMatrix::new(0),
                metrics: Metrics {
                    aac: 0.0,
                    bwt: 0.0,
                    fwt: None,
                },
                probes,
            },
        }],
        aggregate: Aggregate::from_seeds(&[]),
    };
    Ok(match kind {
        ProbeKind::Hdiv => hdiv_table(&record(ProbeOutputs {
            hdiv: probe_hdiv(&ck.system, &tests, ck.seed)?,
            ..ProbeOutputs::default()
        })),
        ProbeKind::Flatness => flatness_table(&record(ProbeOutputs {
            flatness: Some(flatness_probe(&ck.system, &tests, p.flatness_directions, &p.flatness_radii, ck.seed)?),
            ..ProbeOutputs::default()
        })),
        ProbeKind::Diversity => diversity_table(&record(ProbeOutputs {
            diversity: Some(probe_diversity(&ck.system, &tests)?),
            ..ProbeOutputs::default()
        })),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerKind;
    use crate::strategy::StrategyConfig;

    #[allow(clippy::field_reassign_with_default)]
    pub(crate) fn small(dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.name = "small".into();
        c.stream.spec.tasks = 3;
        c.stream.spec.n_train = 20;
        c.stream.spec.n_test = 20;
        c.stream.spec.input_dim = 6;
        c.ensemble.k = 2;
        c.ensemble.learner.hidden_widths = vec![8];
        c.ensemble.learner.feature_dim = 4;
        c.strategy = StrategyConfig::Ewc {
            lambda: 10.0,
            fisher_samples: Some(10),
        };
        c.train.epochs = 2;
        c.train.batch_size = 16;
        c.train.optimizer = OptimizerKind::adam(0.01);
        c.run.seeds = vec![3, 4];
        c.run.output_dir = dir.to_path_buf();
        c.probes.hdiv = true;
        c.probes.flatness = true;
        c.probes.diversity = true;
        c.probes.flatness_directions = 2;
        c.probes.flatness_radii = vec![0.0, 0.5];
        c
    }

    #[test]
    fn stat_uses_sample_std() {
        let s = Stat::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 1.0).abs() < 1e-15);
        assert_eq!(Stat::of(&[4.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn run_writes_outputs_and_checkpoints() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small(&tmp.path().join("nested/out"));
        let (rec, dir) = run_experiment(&cfg).unwrap();
        assert!(!rec.aggregate.partial);
        assert_eq!(rec.aggregate.completed, 2);
        for f in ["summary.json", "accuracy.csv", "metrics.csv", "hdiv.csv", "flatness.csv", "diversity.csv", "timing.log"] {
            assert!(dir.join(f).exists(), "{f}");
        }
        let ck = Checkpoint::load(&checkpoint_path(&dir.join("checkpoints"), 3, 3)).unwrap();
        assert_eq!(ck.tasks_completed, 3);
        assert_eq!(read_record(&dir.join("summary.json")).unwrap(), rec);
        let csv = probe_checkpoint(&ck, ProbeKind::Diversity).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * 3);
    }

    #[test]
    fn failing_seed_is_isolated() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small(tmp.path());
        cfg.probes = Default::default();
        // A huge learning rate makes the loss non-finite.
        cfg.run.seeds = vec![1];
        cfg.train.optimizer = OptimizerKind::Sgd { lr: 1e200 };
        let rec = run_seeds(&cfg, None).unwrap();
        assert!(rec.aggregate.partial);
        assert!(matches!(rec.seeds[0].outcome, SeedOutcome::Failed { .. }));
        assert!(rec.aggregate.aac.is_none());
    }

    #[test]
    fn unwritable_output_is_io_error() {
        let tmp = tempfile::tempdir().unwrap();
        let blocker = tmp.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let mut cfg = small(&blocker.join("sub"));
        cfg.run.seeds = vec![1];
        assert!(matches!(run_experiment(&cfg), Err(Error::Io { .. })));
    }

    #[test]
    fn sweep_configs_shapes() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small(tmp.path());
        cfg.budget.total = Some(3000);
        let ks = sweep_configs(&cfg, SweepAxis::KVsWidth, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(ks.len(), 6);
        for (v, _, c) in &ks {
            let c = c.as_ref().unwrap();
            assert_eq!(c.ensemble.k, *v as usize);
            assert!(parameter_count(c).unwrap() <= 3000);
        }
        let pairs = sweep_configs(&cfg, SweepAxis::TotalBudget, &[2000.0, 4000.0]).unwrap();
        assert_eq!(pairs.len(), 4);
        assert!(pairs.iter().all(|(_, _, c)| c.is_ok()));
        assert!(matches!(sweep_configs(&cfg, SweepAxis::Gamma, &[]), Err(Error::Config(_))));
        let bad = sweep_configs(&cfg, SweepAxis::KVsWidth, &[2000.0]).unwrap();
        assert!(bad[0].2.is_err());
    }

    #[test]
    fn parity_check_rejects_mismatch() {
        let tmp = tempfile::tempdir().unwrap();
        let mut a = small(tmp.path());
        a.budget.total = Some(4000);
        let s = scl_variant(&a);
        check_budget_parity(&a, &s).unwrap();
        let mut big = s.clone();
        big.budget.total = Some(8000);
        assert!(matches!(check_budget_parity(&a, &big), Err(Error::Config(_))));
    }
}
