//! The `glearn` binary: argument parsing and report emission around the
//! drivers in [`glearn_cli::experiments`].
//!
//! Exit codes: 0 — experiment completed; 1 — usage or configuration error;
//! 2 — missing or malformed data; 3 — a run aborted on non-finite values
//! (partial failures list the affected seeds and still write the report).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use glearn_core::dataset::PerturbMode;
use glearn_cli::config::ExperimentConfig;
use glearn_cli::experiments::{self, ConvergenceReport, Split};
use glearn_cli::report::ReportDir;
use glearn_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "glearn", version, about = "Experiment runner for joint graph and GCN learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (flat TOML).
    #[arg(long)]
    config: PathBuf,

    /// Override a config key, e.g. --set lambda=0.6 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Comma-separated seeds, overriding the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Directory for report.jsonl, summary.txt, and CSV curves.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Delete,
    Add,
}

#[derive(Subcommand)]
enum Command {
    /// Train on every seed and report test accuracy.
    Train(CommonArgs),

    /// Train on every seed and score a chosen split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Split to score.
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },

    /// Retrain on damaged starting graphs and compare against the
    /// fixed-graph reference.
    Robustness {
        #[command(flatten)]
        common: CommonArgs,
        /// Whether edges are deleted or added.
        #[arg(long, value_enum, default_value_t = ModeArg::Delete)]
        mode: ModeArg,
        /// Comma-separated perturbation ratios.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.25, 0.5, 0.75])]
        ratios: Vec<f64>,
    },

    /// Trace refinement rounds under the dynamic stop and under every fixed
    /// round count.
    Convergence(CommonArgs),

    /// Compare training time with and without refinement, plus a synthetic
    /// size sweep.
    Timing {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated synthetic node counts.
        #[arg(long, value_delimiter = ',', default_values_t = vec![100, 200, 400])]
        sizes: Vec<usize>,
    },
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests print to stdout and succeed; real
            // parse errors are usage failures.
            let code = i32::from(e.use_stderr());
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config, &common.set)?;
    if let Some(seeds) = &common.seeds {
        if seeds.is_empty() {
            return Err(CliError::usage("--seeds must list at least one seed"));
        }
        cfg.seeds = seeds.clone();
    }
    Ok(cfg)
}

/// Prints the summary and, with `--out`, writes the records, the summary,
/// and any experiment-specific curve files.
fn emit(
    common: &CommonArgs,
    summary: &str,
    records: Vec<serde_json::Value>,
    curves: impl FnOnce(&ReportDir) -> Result<()>,
) -> Result<()> {
    print!("{summary}");
    if let Some(out) = &common.out {
        let dir = ReportDir::create(out)?;
        dir.records(&records)?;
        dir.summary(summary)?;
        curves(&dir)?;
    }
    Ok(())
}

/// Exit-code policy for seed sweeps: any failed seed turns the whole
/// experiment into a numerical failure naming the seeds, after the report
/// (covering the seeds that did run) has been written.
fn finish(failed: Vec<u64>, total: usize) -> Result<()> {
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::numerical(format!(
            "{} of {total} seed(s) failed: {failed:?}",
            failed.len()
        )))
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = resolve(&common)?;
            let report = experiments::run_train(&cfg)?;
            emit(&common, &report.summary_text(), report.records(), |_| Ok(()))?;
            finish(report.set.failed_seeds(), cfg.seeds.len())
        }
        Command::Eval { common, split } => {
            let cfg = resolve(&common)?;
            let report = experiments::run_eval(&cfg, split.into())?;
            emit(&common, &report.summary_text(), report.records(), |_| Ok(()))?;
            finish(report.set.failed_seeds(), cfg.seeds.len())
        }
        Command::Robustness { common, mode, ratios } => {
            let cfg = resolve(&common)?;
            let mode = match mode {
                ModeArg::Delete => PerturbMode::Delete,
                ModeArg::Add => PerturbMode::Add,
            };
            let report = experiments::run_robustness(&cfg, mode, &ratios)?;
            emit(&common, &report.summary_text(), report.records(), |dir| {
                let rows: Vec<String> = report
                    .rows
                    .iter()
                    .map(|r| {
                        format!(
                            "{},{},{},{}",
                            r.ratio, r.variant, r.set.mean_accuracy, r.set.std_accuracy
                        )
                    })
                    .collect();
                dir.csv("robustness", "ratio,variant,mean_accuracy,std_accuracy", &rows)
            })?;
            finish(report.failed_seeds(), cfg.seeds.len())
        }
        Command::Convergence(common) => {
            let cfg = resolve(&common)?;
            let report = experiments::run_convergence(&cfg)?;
            emit(&common, &report.summary_text(), report.records(), |dir| {
                dir.csv(
                    "dynamic",
                    "iteration,delta_a,accuracy",
                    &ConvergenceReport::csv_rows(&report.dynamic),
                )?;
                for (j, curve) in report.fixed.iter().enumerate() {
                    dir.csv(
                        &format!("fixed_{:02}", j + 1),
                        "iteration,delta_a,accuracy",
                        &ConvergenceReport::csv_rows(curve),
                    )?;
                }
                let rows: Vec<String> = report
                    .fixed
                    .iter()
                    .zip(&report.fixed_accuracies)
                    .enumerate()
                    .map(|(j, (curve, acc))| {
                        let delta = curve
                            .last()
                            .and_then(|p| p.delta_a)
                            .map(|d| d.to_string())
                            .unwrap_or_default();
                        format!("{},{delta},{acc}", j + 1)
                    })
                    .collect();
                dir.csv("fixed_summary", "iterations,delta_a,accuracy", &rows)
            })
        }
        Command::Timing { common, sizes } => {
            let cfg = resolve(&common)?;
            let report = experiments::run_timing(&cfg, &sizes)?;
            emit(&common, &report.summary_text(), report.records(), |dir| {
                let rows: Vec<String> = report
                    .scaling
                    .iter()
                    .map(|p| format!("{},{}", p.nodes, p.secs_per_epoch))
                    .collect();
                dir.csv("scaling", "nodes,secs_per_epoch", &rows)
            })
        }
    }
}
