use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use coscl::config::ExperimentConfig;
use coscl::harness::{self, Checkpoint, PlotKind, ProbeKind, SweepAxis};
use coscl::Error;

/// Continual learning with cooperating small learners.
#[derive(Parser)]
#[command(name = "coscl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every seed of an experiment config.
    Run { config: PathBuf },
    /// Run a config over a grid of values along one axis.
    Sweep {
        config: PathBuf,
        /// k_vs_width, gamma, gate_scale or total_budget.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        grid: Vec<f64>,
    },
    /// Run a probe on a saved checkpoint and print a CSV table.
    Probe {
        checkpoint: PathBuf,
        /// hdiv, flatness or diversity.
        #[arg(long)]
        kind: ProbeKind,
    },
    /// Write plot-ready CSV files from saved run records.
    Emit {
        records: PathBuf,
        /// curve, sweep, flatness or diversity.
        #[arg(long)]
        kind: PlotKind,
        /// Destination directory; defaults to `<records>/plots`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Outcome {
    Complete,
    Partial,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(Outcome::Complete) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn execute(cmd: Command) -> Result<Outcome, Error> {
    match cmd {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (record, dir) = harness::run_experiment(&cfg)?;
            let agg = &record.aggregate;
            match agg.aac {
                Some(aac) => println!(
                    "{}: AAC {:.4} +/- {:.4} over {} seed(s) -> {}",
                    cfg.name,
                    aac.mean,
                    aac.std,
                    agg.completed,
                    dir.display()
                ),
                None => println!("{}: no seed completed -> {}", cfg.name, dir.display()),
            }
            for s in &record.seeds {
                if let harness::SeedOutcome::Failed { error } = &s.outcome {
                    eprintln!("seed {} failed: {error}", s.seed);
                }
            }
            Ok(if agg.partial { Outcome::Partial } else { Outcome::Complete })
        }
        Command::Sweep { config, axis, grid } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (points, dir) = harness::sweep(&cfg, axis, &grid)?;
            let mut partial = false;
            for p in &points {
                match (&p.record, &p.skipped) {
                    (Some(r), _) => {
                        partial |= r.aggregate.partial;
                        let aac = r.aggregate.aac.map_or(f64::NAN, |s| s.mean);
                        println!("{}={} {}: AAC {aac:.4}, {} params", axis.name(), p.value, p.variant, r.total_parameters);
                    }
                    (None, reason) => {
                        println!("{}={} {}: skipped ({})", axis.name(), p.value, p.variant, reason.as_deref().unwrap_or(""));
                    }
                }
            }
            println!("sweep table -> {}", dir.join("sweep.csv").display());
            Ok(if partial { Outcome::Partial } else { Outcome::Complete })
        }
        Command::Probe { checkpoint, kind } => {
            let ck = Checkpoint::load(&checkpoint)?;
            print!("{}", harness::probe_checkpoint(&ck, kind)?);
            Ok(Outcome::Complete)
        }
        Command::Emit { records, kind, out } => {
            let out = out.unwrap_or_else(|| records.join("plots"));
            for f in harness::emit_from_dir(&records, kind, &out)? {
                println!("{}", f.display());
            }
            Ok(Outcome::Complete)
        }
    }
}
