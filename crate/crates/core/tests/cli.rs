use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_coscl");

fn config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"
name = "cli"

[stream]
kind = "gaussian_blobs"
tasks = 3
n_train = 20
n_test = 20
input_dim = 6

[ensemble]
k = 2

[ensemble.learner]
hidden_widths = [8]
feature_dim = 4

[strategy]
kind = "mas"
lambda = 1.0

[train]
epochs = 2
batch_size = 16

[run]
seeds = [1, 2]
output_dir = "{}"

[probes]
hdiv = true
flatness = true
flatness_directions = 2
flatness_radii = [0.0, 1.0]
{extra}
"#,
        dir.join("out").display()
    );
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn coscl(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// The single run directory created under `out`.
fn run_dir(out: &Path) -> PathBuf {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.pop().unwrap()
}

#[test]
fn run_probe_and_emit() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let o = coscl(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("AAC"));

    let dir = run_dir(&tmp.path().join("out"));
    for f in ["summary.json", "config.toml", "accuracy.csv", "metrics.csv", "hdiv.csv", "flatness.csv"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let ck = dir.join("checkpoints/seed-1/task-003.json");
    let o = coscl(&["probe", ck.to_str().unwrap(), "--kind", "flatness"]);
    assert_eq!(o.status.code(), Some(0));
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 1 + 2 * 2, "{table}");

    let plots = tmp.path().join("plots");
    let o = coscl(&["emit", dir.to_str().unwrap(), "--kind", "curve", "--out", plots.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let curve = fs::read_to_string(plots.join("curve_cli.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 3);
}

#[test]
fn sweep_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let o = coscl(&["sweep", cfg.to_str().unwrap(), "--axis", "gamma", "--grid", "0,0.1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("gamma=0.1"), "{out}");
    let table_line = out.lines().last().unwrap();
    let path = table_line.rsplit("-> ").next().unwrap();
    let rows = fs::read_to_string(path.trim()).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2);
}

#[test]
fn failed_seed_exits_partial() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    // An enormous SGD step drives the loss to infinity on every seed.
    let text = fs::read_to_string(&cfg).unwrap().replace(
        "batch_size = 16",
        "batch_size = 16\noptimizer = { kind = \"sgd\", lr = 1e200 }",
    );
    fs::write(&cfg, text).unwrap();
    let o = coscl(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed 1 failed"));
}

#[test]
fn bad_config_exits_with_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "unknown_key = 1");
    let o = coscl(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let o = coscl(&["run", tmp.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let o = coscl(&["sweep", cfg.to_str().unwrap(), "--axis", "depth", "--grid", "1"]);
    assert_ne!(o.status.code(), Some(0));
}
