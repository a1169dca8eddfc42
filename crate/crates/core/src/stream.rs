//! Task streams: deterministic synthetic sequences and CSV ingestion.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    /// Global class id.
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    /// Global class ids; a label's position here is its head index.
    pub classes: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// A matrix of inputs with head-local labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Result<Batch> {
        Ok(Batch {
            x: self.x.gather_rows(idx)?,
            y: idx.iter().map(|&i| self.y[i]).collect(),
        })
    }
}

impl Task {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn local_label(&self, global: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == global)
    }

    fn batch(&self, samples: &[Sample]) -> Result<Batch> {
        let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
        let y = samples
            .iter()
            .map(|s| {
                self.local_label(s.label).ok_or_else(|| {
                    Error::Contract(format!("label {} not among task {} classes", s.label, self.id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            x: Tensor::from_rows(&rows)?,
            y,
        })
    }

    pub fn train_batch(&self) -> Result<Batch> {
        self.batch(&self.train)
    }

    pub fn test_batch(&self) -> Result<Batch> {
        self.batch(&self.test)
    }

    pub fn input_dim(&self) -> usize {
        self.train
            .first()
            .or(self.test.first())
            .map_or(0, |s| s.x.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    GaussianBlobs,
    RotatedMoons,
    PermutedFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamSpec {
    pub kind: StreamKind,
    pub tasks: usize,
    pub classes_per_task: usize,
    /// Training samples per class.
    pub n_train: usize,
    /// Test samples per class.
    pub n_test: usize,
    pub input_dim: usize,
    pub seed: u64,
    /// Monotone knob on task overlap / divergence; see [`generate`].
    pub difficulty: f64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            kind: StreamKind::GaussianBlobs,
            tasks: 10,
            classes_per_task: 2,
            n_train: 100,
            n_test: 100,
            input_dim: 16,
            seed: 0,
            difficulty: 0.5,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.tasks < 2 {
            return bad(format!("stream needs at least 2 tasks, got {}", self.tasks));
        }
        if self.n_train < 10 {
            return bad(format!("n_train must be at least 10, got {}", self.n_train));
        }
        if self.n_test == 0 || self.input_dim == 0 || self.classes_per_task < 2 {
            return bad("n_test, input_dim must be positive and classes_per_task >= 2".into());
        }
        if !(self.difficulty.is_finite() && self.difficulty >= 0.0) {
            return bad(format!("difficulty must be finite and >= 0, got {}", self.difficulty));
        }
        match self.kind {
            StreamKind::RotatedMoons if self.classes_per_task != 2 || self.input_dim < 2 => {
                bad("rotated_moons needs classes_per_task = 2 and input_dim >= 2".into())
            }
            StreamKind::PermutedFeatures if self.difficulty > 1.0 => {
                bad("permuted_features difficulty is a fraction in [0, 1]".into())
            }
            _ => Ok(()),
        }
    }
}

fn normal(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

/// Generates the task sequence described by `spec`.
///
/// * `gaussian_blobs`: every global class gets a mean on the lattice
///   `{-1, 0, 1}^d`; samples add isotropic noise with standard deviation
///   `0.5 + difficulty`.
/// * `rotated_moons`: the same two-moons problem embedded in the first two
///   coordinates, rotated by `t * difficulty * pi / 4` for task `t`; extra
///   coordinates carry small noise.
/// * `permuted_features`: one shared blob problem; task `t` shuffles a
///   fraction `difficulty` of the coordinates with a task-specific
///   permutation.
pub fn generate(spec: &StreamSpec) -> Result<Vec<Task>> {
    spec.validate()?;
    let c = spec.classes_per_task;
    let d = spec.input_dim;

    let mut mean_rng = rng::rng(spec.seed, &[rng::TAG_DATA, 0]);
    let lattice = |r: &mut rng::Rng| -> Vec<f64> { (0..d).map(|_| r.random_range(-1i32..=1) as f64).collect() };
    let means: Vec<Vec<f64>> = match spec.kind {
        StreamKind::GaussianBlobs => (0..spec.tasks * c).map(|_| lattice(&mut mean_rng)).collect(),
        StreamKind::PermutedFeatures => (0..c).map(|_| lattice(&mut mean_rng)).collect(),
        StreamKind::RotatedMoons => Vec::new(),
    };

    (0..spec.tasks)
        .map(|t| {
            let classes: Vec<usize> = (t * c..(t + 1) * c).collect();
            let perm = match spec.kind {
                StreamKind::PermutedFeatures => partial_permutation(d, spec.difficulty, spec.seed, t),
                _ => (0..d).collect(),
            };
            let draw = |split: u64, per_class: usize| -> Vec<Sample> {
                let mut r = rng::rng(spec.seed, &[rng::TAG_DATA, 1, t as u64, split]);
                let mut out = Vec::with_capacity(per_class * c);
                for (local, &global) in classes.iter().enumerate() {
                    for _ in 0..per_class {
                        let x = match spec.kind {
                            StreamKind::GaussianBlobs => {
                                let sd = 0.5 + spec.difficulty;
                                means[global].iter().map(|m| m + sd * normal(&mut r)).collect()
                            }
                            StreamKind::PermutedFeatures => {
                                let base: Vec<f64> =
                                    means[local].iter().map(|m| m + 0.5 * normal(&mut r)).collect();
                                perm.iter().map(|&j| base[j]).collect()
                            }
                            StreamKind::RotatedMoons => {
                                moon_sample(local, t, spec.difficulty, d, &mut r)
                            }
                        };
                        out.push(Sample { x, label: global });
                    }
                }
                out
            };
            let train = draw(0, spec.n_train);
            let test = draw(1, spec.n_test);
            Ok(Task {
                id: t,
                classes,
                train,
                test,
            })
        })
        .collect()
}

fn moon_sample(class: usize, task: usize, difficulty: f64, d: usize, r: &mut rng::Rng) -> Vec<f64> {
    let theta = r.random_range(0.0..std::f64::consts::PI);
    let (mut px, mut py) = if class == 0 {
        (theta.cos(), theta.sin())
    } else {
        (1.0 - theta.cos(), 0.5 - theta.sin())
    };
    px += 0.1 * normal(r) - 0.5;
    py += 0.1 * normal(r) - 0.25;
    let angle = task as f64 * difficulty * std::f64::consts::FRAC_PI_4;
    let (s, co) = angle.sin_cos();
    let mut x = vec![co * px - s * py, s * px + co * py];
    x.extend((2..d).map(|_| 0.1 * normal(r)));
    x
}

/// Permutation of `0..d` that shuffles `round(fraction * d)` seeded
/// coordinates among themselves and fixes the rest.
fn partial_permutation(d: usize, fraction: f64, seed: u64, task: usize) -> Vec<usize> {
    let mut r = rng::rng(seed, &[rng::TAG_DATA, 2, task as u64]);
    let m = ((fraction * d as f64).round() as usize).min(d);
    let mut chosen: Vec<usize> = (0..d).collect();
    chosen.shuffle(&mut r);
    chosen.truncate(m);
    chosen.sort_unstable();
    let mut shuffled = chosen.clone();
    shuffled.shuffle(&mut r);
    let mut perm: Vec<usize> = (0..d).collect();
    for (&dst, &src) in chosen.iter().zip(&shuffled) {
        perm[dst] = src;
    }
    perm
}

/// Column roles for [`ingest_csv`]. An empty `features` list selects every
/// column other than the label and task columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    #[serde(default)]
    pub features: Vec<String>,
    pub label: String,
    pub task: String,
}

/// Reads a labeled stream from CSV. Tasks are ordered by the task column;
/// each task's rows are shuffled with `split_seed` and split 80/20 into
/// train and test.
pub fn ingest_csv(path: &Path, schema: &CsvSchema, split_seed: u64) -> Result<Vec<Task>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(Error::Schema(format!("{} has no header row", path.display())));
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("unknown column '{name}'")))
    };
    let label_col = col(&schema.label)?;
    let task_col = col(&schema.task)?;
    let feature_cols: Vec<usize> = if schema.features.is_empty() {
        (0..headers.len())
            .filter(|&i| i != label_col && i != task_col)
            .collect()
    } else {
        schema.features.iter().map(|f| col(f)).collect::<Result<_>>()?
    };
    if feature_cols.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }

    let mut by_task: BTreeMap<i64, Vec<Sample>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| record.get(i).unwrap_or("");
        if record.len() != headers.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let x = feature_cols
            .iter()
            .map(|&i| {
                let s = field(i);
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line,
                        msg: format!("non-numeric feature '{s}' in column '{}'", &headers[i]),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let int = |i: usize| -> Result<i64> {
            field(i).parse::<i64>().map_err(|_| Error::Parse {
                line,
                msg: format!("non-integer '{}' in column '{}'", field(i), &headers[i]),
            })
        };
        let label = int(label_col)?;
        let task = int(task_col)?;
        if label < 0 {
            return Err(Error::Parse {
                line,
                msg: format!("negative label {label}"),
            });
        }
        by_task.entry(task).or_default().push(Sample {
            x,
            label: label as usize,
        });
    }
    if by_task.is_empty() {
        return Err(Error::Schema(format!("{} has no data rows", path.display())));
    }

    Ok(by_task
        .into_values()
        .enumerate()
        .map(|(id, mut samples)| {
            let mut classes: Vec<usize> = samples.iter().map(|s| s.label).collect();
            classes.sort_unstable();
            classes.dedup();
            samples.shuffle(&mut rng::rng(split_seed, &[rng::TAG_SPLIT, id as u64]));
            let n_train = (samples.len() * 4).div_ceil(5);
            let test = samples.split_off(n_train);
            Task {
                id,
                classes,
                train: samples,
                test,
            }
        })
        .collect())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize);
    match (e.into_kind(), line) {
        (csv::ErrorKind::Io(io), _) => Error::io(path, io),
        (kind, Some(line)) => Error::Parse {
            line,
            msg: format!("{kind:?}"),
        },
        (kind, None) => Error::Schema(format!("{}: {kind:?}", path.display())),
    }
}

/// Reorders tasks by `order` and renumbers them by position.
pub fn reorder(tasks: &[Task], order: &[usize]) -> Result<Vec<Task>> {
    let mut seen = vec![false; tasks.len()];
    if order.len() != tasks.len() {
        return Err(Error::dim("task order", &[tasks.len()], &[order.len()]));
    }
    order
        .iter()
        .enumerate()
        .map(|(pos, &src)| {
            if src >= tasks.len() || std::mem::replace(&mut seen[src], true) {
                return Err(Error::Contract(format!("task order {order:?} is not a permutation")));
            }
            Ok(Task {
                id: pos,
                ..tasks[src].clone()
            })
        })
        .collect()
}

/// Seeded shuffle of `0..n`.
pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(seed, &[rng::TAG_ORDER]));
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn spec(kind: StreamKind) -> StreamSpec {
        StreamSpec {
            kind,
            tasks: 3,
            n_train: 20,
            n_test: 10,
            input_dim: 6,
            seed: 42,
            ..StreamSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        for kind in [StreamKind::GaussianBlobs, StreamKind::RotatedMoons, StreamKind::PermutedFeatures] {
            let a = generate(&spec(kind)).unwrap();
            let b = generate(&spec(kind)).unwrap();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        }
    }

    #[test]
    fn structure_twenty_tasks() {
        let s = StreamSpec {
            tasks: 20,
            classes_per_task: 2,
            ..spec(StreamKind::GaussianBlobs)
        };
        let tasks = generate(&s).unwrap();
        assert_eq!(tasks.len(), 20);
        let mut all = Vec::new();
        for (t, task) in tasks.iter().enumerate() {
            assert_eq!(task.id, t);
            assert_eq!(task.classes, vec![2 * t, 2 * t + 1]);
            assert_eq!(task.train.len(), 40);
            assert_eq!(task.test.len(), 20);
            assert!(task.train.iter().chain(&task.test).all(|s| task.classes.contains(&s.label)));
            all.extend(task.classes.iter().copied());
        }
        all.dedup();
        assert_eq!(all.len(), 40);
    }

    #[test]
    fn zero_difficulty_moons_identically_distributed() {
        let s = StreamSpec {
            difficulty: 0.0,
            n_train: 2000,
            n_test: 10,
            ..spec(StreamKind::RotatedMoons)
        };
        let tasks = generate(&s).unwrap();
        let moments = |t: &Task| -> (f64, f64) {
            let first: Vec<&Sample> = t.train.iter().filter(|s| s.label == t.classes[0]).collect();
            let n = first.len() as f64;
            let mx = first.iter().map(|s| s.x[0]).sum::<f64>() / n;
            let my = first.iter().map(|s| s.x[1]).sum::<f64>() / n;
            (mx, my)
        };
        let (a, b) = (moments(&tasks[0]), moments(&tasks[2]));
        assert!((a.0 - b.0).abs() < 0.05 && (a.1 - b.1).abs() < 0.05, "{a:?} {b:?}");

        let rotated = generate(&StreamSpec { difficulty: 2.0, ..s }).unwrap();
        let c = moments(&rotated[2]);
        assert!((a.0 - c.0).abs() + (a.1 - c.1).abs() > 0.1, "{a:?} {c:?}");
    }

    #[test]
    fn zero_difficulty_permutation_is_identity() {
        assert_eq!(partial_permutation(8, 0.0, 1, 3), (0..8).collect::<Vec<_>>());
        let p = partial_permutation(8, 1.0, 1, 3);
        let mut sorted = p.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn train_test_disjoint() {
        for task in generate(&spec(StreamKind::GaussianBlobs)).unwrap() {
            for s in &task.test {
                assert!(!task.train.contains(s));
            }
        }
    }

    #[test]
    fn invalid_spec() {
        let mut s = spec(StreamKind::GaussianBlobs);
        s.tasks = 1;
        assert!(matches!(generate(&s), Err(Error::Config(_))));
        let mut s = spec(StreamKind::RotatedMoons);
        s.classes_per_task = 3;
        assert!(matches!(generate(&s), Err(Error::Config(_))));
        let mut s = spec(StreamKind::GaussianBlobs);
        s.n_train = 9;
        assert!(matches!(generate(&s), Err(Error::Config(_))));
    }

    fn write_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    fn schema() -> CsvSchema {
        CsvSchema {
            features: vec!["a".into(), "b".into()],
            label: "label".into(),
            task: "task".into(),
        }
    }

    #[test]
    fn csv_toy_memberships() {
        let f = write_csv("a,b,label,task\n0.1,0.2,0,7\n0.3,0.4,1,7\n1.0,1.5,2,3\n2.0,2.5,3,3\n");
        let tasks = ingest_csv(f.path(), &schema(), 0).unwrap();
        assert_eq!(tasks.len(), 2);
        // task column 3 sorts before 7
        assert_eq!(tasks[0].classes, vec![2, 3]);
        assert_eq!(tasks[1].classes, vec![0, 1]);
        let members = |t: &Task| {
            let mut v: Vec<usize> = t.train.iter().chain(&t.test).map(|s| s.label).collect();
            v.sort_unstable();
            v
        };
        assert_eq!(members(&tasks[0]), vec![2, 3]);
        assert_eq!(members(&tasks[1]), vec![0, 1]);
        let x: Vec<Vec<f64>> = tasks[1].train.iter().chain(&tasks[1].test).map(|s| s.x.clone()).collect();
        assert!(x.contains(&vec![0.1, 0.2]) && x.contains(&vec![0.3, 0.4]));
    }

    #[test]
    fn csv_split_eighty_twenty() {
        let mut body = String::from("a,b,label,task\n");
        for i in 0..10 {
            body.push_str(&format!("{i},{i},{},0\n", i % 2));
        }
        let f = write_csv(&body);
        let tasks = ingest_csv(f.path(), &schema(), 5).unwrap();
        assert_eq!(tasks[0].train.len(), 8);
        assert_eq!(tasks[0].test.len(), 2);
        assert_eq!(tasks, ingest_csv(f.path(), &schema(), 5).unwrap());
    }

    #[test]
    fn csv_errors() {
        let f = write_csv("");
        assert!(matches!(ingest_csv(f.path(), &schema(), 0), Err(Error::Schema(_))));

        let f = write_csv("a,b,label,task\n0.1,0.2,0,0\n0.1,oops,1,0\n");
        match ingest_csv(f.path(), &schema(), 0) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("oops"));
            }
            other => panic!("{other:?}"),
        }

        let f = write_csv("a,b,label,task\n0.1,0.2,0,0\n");
        let bad = CsvSchema {
            label: "class".into(),
            ..schema()
        };
        assert!(matches!(ingest_csv(f.path(), &bad, 0), Err(Error::Schema(_))));
    }

    #[test]
    fn reorder_renumbers() {
        let tasks = generate(&spec(StreamKind::GaussianBlobs)).unwrap();
        let r = reorder(&tasks, &[2, 0, 1]).unwrap();
        assert_eq!(r[0].classes, tasks[2].classes);
        assert_eq!(r.iter().map(|t| t.id).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(reorder(&tasks, &[0, 0, 1]).is_err());
    }
}
