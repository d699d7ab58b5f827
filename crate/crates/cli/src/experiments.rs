//! The five experiment drivers.
//!
//! Each driver loads the dataset named by the config, runs the library once
//! per seed, and returns a plain result struct that knows how to render
//! itself as JSONL records and as a human-readable summary. Seeds that abort
//! on non-finite values are collected as failures instead of killing the
//! sweep; the caller decides the exit code from them.

use std::rc::Rc;
use std::time::Instant;

use glearn_core::dataset::{perturb_edges, Dataset, PerturbMode};
use glearn_core::engine::{
    accuracy, ablation_mode, evaluate, fit, forward_pass, AblationMode, ForwardOptions,
    IterationTrace, RunConfig,
};
use glearn_core::numkit::Mat;
use glearn_core::Error;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::io::load_dataset;
use crate::report::{mean_std, pct};
use crate::{CliError, Result};

/// Which node mask a run is scored on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn mask(self, ds: &Dataset) -> &[u32] {
        match self {
            Split::Train => &ds.splits.train,
            Split::Dev => &ds.splits.dev,
            Split::Test => &ds.splits.test,
        }
    }
}

/// One completed training run.
#[derive(Clone, Debug, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub accuracy: f64,
    pub wall_secs: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    /// Set when training stopped early on a non-finite value but still had
    /// a usable best-epoch snapshot.
    pub divergence: Option<String>,
}

/// A seed whose run produced no usable model at all.
#[derive(Clone, Debug, Serialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

/// All seed runs of one model variant, with accuracy statistics.
#[derive(Clone, Debug, Serialize)]
pub struct RunSet {
    pub runs: Vec<SeedRun>,
    pub failures: Vec<SeedFailure>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

impl RunSet {
    pub fn failed_seeds(&self) -> Vec<u64> {
        self.failures.iter().map(|f| f.seed).collect()
    }
}

/// Trains one seed and scores it on `split`.
///
/// A numerical abort is a per-seed outcome (`Ok(Err(..))`); anything else
/// (bad masks, bad config) is a hard error, since every seed would fail the
/// same way.
fn one_run(
    ds: &Dataset,
    rc: &RunConfig,
    split: Split,
) -> Result<std::result::Result<SeedRun, SeedFailure>> {
    let started = Instant::now();
    let (params, history) = match fit(ds, rc) {
        Ok(f) => f,
        Err(Error::Numerical(msg)) => return Ok(Err(SeedFailure { seed: rc.seed, error: msg })),
        Err(e) => return Err(e.into()),
    };
    let acc = match evaluate(&params, ds, split.mask(ds), rc) {
        Ok(a) => a,
        Err(Error::Numerical(msg)) => return Ok(Err(SeedFailure { seed: rc.seed, error: msg })),
        Err(e) => return Err(e.into()),
    };
    Ok(Ok(SeedRun {
        seed: rc.seed,
        accuracy: acc,
        wall_secs: started.elapsed().as_secs_f64(),
        epochs: history.epochs.len(),
        best_epoch: history.best_epoch,
        best_dev_accuracy: history.best_dev_accuracy,
        divergence: history.divergence,
    }))
}

fn collect_runs(
    outcomes: Vec<std::result::Result<SeedRun, SeedFailure>>,
) -> RunSet {
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => runs.push(r),
            Err(f) => failures.push(f),
        }
    }
    let accs: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&accs);
    RunSet { runs, failures, mean_accuracy, std_accuracy }
}

/// Trains and scores one run per configured seed on `ds`.
fn run_seeds(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    make_config: impl Fn(u64) -> RunConfig,
    split: Split,
) -> Result<RunSet> {
    let mut outcomes = Vec::new();
    for &seed in &cfg.seeds {
        outcomes.push(one_run(ds, &make_config(seed), split)?);
    }
    Ok(collect_runs(outcomes))
}

/// Result of `train` and `eval`: one model variant scored on one split.
#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub dataset: String,
    pub split: String,
    pub config: ExperimentConfig,
    pub warnings: Vec<String>,
    pub set: RunSet,
}

impl TrainReport {
    pub fn records(&self) -> Vec<Value> {
        let mut out = Vec::new();
        for r in &self.set.runs {
            out.push(json!({"record": "run", "dataset": self.dataset, "split": self.split,
                "seed": r.seed, "accuracy": r.accuracy, "wall_secs": r.wall_secs,
                "epochs": r.epochs, "best_epoch": r.best_epoch,
                "best_dev_accuracy": r.best_dev_accuracy, "divergence": r.divergence}));
        }
        for f in &self.set.failures {
            out.push(json!({"record": "failure", "seed": f.seed, "error": f.error}));
        }
        out.push(json!({"record": "summary", "dataset": self.dataset, "split": self.split,
            "mean_accuracy": self.set.mean_accuracy, "std_accuracy": self.set.std_accuracy,
            "seeds": self.config.seeds, "config": self.config, "warnings": self.warnings}));
        out
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{} — {} accuracy over {} seed(s)\n",
            self.dataset,
            self.split,
            self.config.seeds.len()
        ));
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        for r in &self.set.runs {
            s.push_str(&format!(
                "  seed {:>3}: {}%  ({} epochs, best {} at epoch {}, {:.1}s){}\n",
                r.seed,
                pct(r.accuracy),
                r.epochs,
                pct(r.best_dev_accuracy),
                r.best_epoch,
                r.wall_secs,
                r.divergence.as_deref().map(|d| format!("  [stopped early: {d}]")).unwrap_or_default(),
            ));
        }
        for f in &self.set.failures {
            s.push_str(&format!("  seed {:>3}: FAILED — {}\n", f.seed, f.error));
        }
        if !self.set.runs.is_empty() {
            s.push_str(&format!(
                "  mean {} ± {}\n",
                pct(self.set.mean_accuracy),
                pct(self.set.std_accuracy)
            ));
        }
        s
    }
}

/// Trains the configured model on every seed and scores the test split.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    run_eval(cfg, Split::Test)
}

/// Like [`run_train`], scoring the requested split instead.
pub fn run_eval(cfg: &ExperimentConfig, split: Split) -> Result<TrainReport> {
    let (ds, warnings) = load_dataset(cfg)?;
    let set = run_seeds(&ds, cfg, |seed| cfg.run_config(seed), split)?;
    Ok(TrainReport {
        dataset: ds.name.clone(),
        split: split.name().to_owned(),
        config: cfg.clone(),
        warnings,
        set,
    })
}

/// One (ratio, variant) cell of the robustness table.
#[derive(Clone, Debug, Serialize)]
pub struct RobustnessRow {
    pub ratio: f64,
    /// `"full"` — the configured model; `"gcn"` — the fixed-graph reference
    /// (starting graph used as-is, no structure learning or refinement).
    pub variant: String,
    pub set: RunSet,
}

#[derive(Clone, Debug, Serialize)]
pub struct RobustnessReport {
    pub dataset: String,
    pub mode: String,
    pub config: ExperimentConfig,
    pub warnings: Vec<String>,
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    pub fn records(&self) -> Vec<Value> {
        let mut out = Vec::new();
        for row in &self.rows {
            out.push(json!({"record": "robustness-row", "dataset": self.dataset,
                "mode": self.mode, "ratio": row.ratio, "variant": row.variant,
                "mean_accuracy": row.set.mean_accuracy, "std_accuracy": row.set.std_accuracy,
                "runs": row.set.runs, "failures": row.set.failures}));
        }
        out.push(json!({"record": "summary", "dataset": self.dataset, "mode": self.mode,
            "seeds": self.config.seeds, "config": self.config, "warnings": self.warnings}));
        out
    }

    pub fn summary_text(&self) -> String {
        let mut s = format!(
            "{} — edge {} robustness, mean accuracy over {} seed(s)\n",
            self.dataset,
            self.mode,
            self.config.seeds.len()
        );
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s.push_str("  ratio   variant   accuracy\n");
        for row in &self.rows {
            s.push_str(&format!(
                "  {:<7} {:<9} {}% ± {}{}\n",
                row.ratio,
                row.variant,
                pct(row.set.mean_accuracy),
                pct(row.set.std_accuracy),
                if row.set.failures.is_empty() {
                    String::new()
                } else {
                    format!("  ({} seed(s) failed)", row.set.failures.len())
                },
            ));
        }
        s
    }

    pub fn failed_seeds(&self) -> Vec<u64> {
        let mut seeds: Vec<u64> =
            self.rows.iter().flat_map(|r| r.set.failed_seeds()).collect();
        seeds.sort_unstable();
        seeds.dedup();
        seeds
    }
}

/// Per ratio and seed, perturbs the starting graph, then trains and scores
/// both the configured model and the fixed-graph reference on the damaged
/// graph. Requires a dataset that ships an edge list.
pub fn run_robustness(
    cfg: &ExperimentConfig,
    mode: PerturbMode,
    ratios: &[f64],
) -> Result<RobustnessReport> {
    if ratios.is_empty() {
        return Err(CliError::usage("robustness needs at least one ratio"));
    }
    let (ds, warnings) = load_dataset(cfg)?;
    let a0 = ds.initial_adjacency.clone().ok_or_else(|| {
        CliError::data(format!(
            "dataset {} has no edges.txt: robustness perturbs the starting graph",
            ds.name
        ))
    })?;

    let mode_name = match mode {
        PerturbMode::Delete => "delete",
        PerturbMode::Add => "add",
    };
    let mut rows = Vec::new();
    for &ratio in ratios {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(CliError::usage(format!("perturbation ratio {ratio} outside [0, 1]")));
        }
        // Each seed damages the graph independently (with the run seed), so
        // the spread per ratio covers the damage process, not just training
        // randomness. Both variants see the same damaged graph per seed.
        let mut damaged_per_seed = Vec::new();
        for &seed in &cfg.seeds {
            let mut damaged = Dataset::new(
                &ds.name,
                ds.features.clone(),
                Rc::clone(&ds.labels),
                ds.classes,
                Some(perturb_edges(&a0, ratio, mode, seed)?),
            )?;
            damaged.set_splits(ds.splits.clone())?;
            damaged_per_seed.push((seed, damaged));
        }
        for variant in ["full", "gcn"] {
            let mut outcomes = Vec::new();
            for (seed, damaged) in &damaged_per_seed {
                let rc = if variant == "gcn" {
                    cfg.gcn_reference(*seed)
                } else {
                    cfg.run_config(*seed)
                };
                outcomes.push(one_run(damaged, &rc, Split::Test)?);
            }
            rows.push(RobustnessRow { ratio, variant: variant.to_owned(), set: collect_runs(outcomes) });
        }
    }
    Ok(RobustnessReport {
        dataset: ds.name.clone(),
        mode: mode_name.to_owned(),
        config: cfg.clone(),
        warnings,
        rows,
    })
}

/// One point of a per-round refinement curve.
#[derive(Clone, Debug, Serialize)]
pub struct CurvePoint {
    /// Refinement round, starting at 1.
    pub iteration: usize,
    /// Relative adjacency change vs the previous round; `None` marks the
    /// undefined case (all-zero adjacency).
    pub delta_a: Option<f64>,
    /// Test accuracy of this round's predictions.
    pub accuracy: f64,
}

/// Result of `convergence`: refinement curves of a single trained model
/// under the dynamic stop and under every fixed round count `1..=T`.
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub dataset: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub warnings: Vec<String>,
    pub stop_reason: String,
    pub dynamic: Vec<CurvePoint>,
    pub dynamic_accuracy: f64,
    /// `fixed[j]` is the curve when exactly `j+1` rounds are forced.
    pub fixed: Vec<Vec<CurvePoint>>,
    /// Final accuracy of each fixed-count run.
    pub fixed_accuracies: Vec<f64>,
}

fn curve_points(trace: &IterationTrace, ds: &Dataset) -> Result<Vec<CurvePoint>> {
    let mut points = Vec::with_capacity(trace.steps.len());
    for (i, step) in trace.steps.iter().enumerate() {
        points.push(CurvePoint {
            iteration: i + 1,
            delta_a: step.delta_a,
            accuracy: accuracy(&step.predictions, &ds.labels, &ds.splits.test)?,
        });
    }
    Ok(points)
}

impl ConvergenceReport {
    pub fn records(&self) -> Vec<Value> {
        let mut out = Vec::new();
        out.push(json!({"record": "convergence", "strategy": "dynamic",
            "dataset": self.dataset, "seed": self.seed, "stop_reason": self.stop_reason,
            "accuracy": self.dynamic_accuracy, "points": self.dynamic}));
        for (j, (curve, acc)) in self.fixed.iter().zip(&self.fixed_accuracies).enumerate() {
            out.push(json!({"record": "convergence", "strategy": "fixed",
                "iterations": j + 1, "accuracy": acc, "points": curve}));
        }
        out.push(json!({"record": "summary", "dataset": self.dataset, "seed": self.seed,
            "config": self.config, "warnings": self.warnings}));
        out
    }

    pub fn summary_text(&self) -> String {
        let mut s = format!(
            "{} — refinement convergence (seed {}, stopped: {})\n",
            self.dataset, self.seed, self.stop_reason
        );
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s.push_str(&format!(
            "  dynamic stop: {} round(s), accuracy {}%\n",
            self.dynamic.len(),
            pct(self.dynamic_accuracy)
        ));
        for p in &self.dynamic {
            let delta = p.delta_a.map(|d| format!("{d:.3e}")).unwrap_or_else(|| "—".into());
            s.push_str(&format!(
                "    round {:>2}: change {delta}, accuracy {}%\n",
                p.iteration,
                pct(p.accuracy)
            ));
        }
        s.push_str("  fixed round counts:\n");
        for (j, acc) in self.fixed_accuracies.iter().enumerate() {
            s.push_str(&format!("    {:>2} round(s): accuracy {}%\n", j + 1, pct(*acc)));
        }
        s
    }

    /// CSV rows (`iteration,delta_a,accuracy`; empty field marks an
    /// undefined change) for one curve.
    pub fn csv_rows(points: &[CurvePoint]) -> Vec<String> {
        points
            .iter()
            .map(|p| {
                let delta = p.delta_a.map(|d| d.to_string()).unwrap_or_default();
                format!("{},{},{}", p.iteration, delta, p.accuracy)
            })
            .collect()
    }
}

/// Trains one model (first configured seed), then traces its refinement
/// under the configured dynamic stop and under fixed counts `1..=T`.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    let (ds, mut warnings) = load_dataset(cfg)?;
    let seed = cfg.seeds[0];
    let rc = cfg.run_config(seed);
    let (params, history) = fit(&ds, &rc)?;
    warnings.extend(history.warnings);

    let mut rng = ChaCha8Rng::seed_from_u64(0); // evaluation mode never draws
    let out = forward_pass(&ds, &params, &rc, ForwardOptions::evaluation(), &mut rng)?;
    let dynamic = curve_points(&out.trace, &ds)?;
    let dynamic_accuracy = accuracy(&out.predictions, &ds.labels, &ds.splits.test)?;
    let stop_reason = format!("{:?}", out.trace.stop_reason);

    let mut fixed = Vec::with_capacity(rc.max_iters);
    let mut fixed_accuracies = Vec::with_capacity(rc.max_iters);
    for rounds in 1..=rc.max_iters {
        // A threshold below any representable change forces every round.
        let forced = RunConfig { stop_delta: 1e-300, max_iters: rounds, ..rc.clone() };
        let out = forward_pass(&ds, &params, &forced, ForwardOptions::evaluation(), &mut rng)?;
        fixed.push(curve_points(&out.trace, &ds)?);
        fixed_accuracies.push(accuracy(&out.predictions, &ds.labels, &ds.splits.test)?);
    }

    Ok(ConvergenceReport {
        dataset: ds.name.clone(),
        seed,
        config: cfg.clone(),
        warnings,
        stop_reason,
        dynamic,
        dynamic_accuracy,
        fixed,
        fixed_accuracies,
    })
}

/// Wall-clock statistics of one model variant.
#[derive(Clone, Debug, Serialize)]
pub struct TimingVariant {
    pub variant: String,
    pub per_seed_secs: Vec<f64>,
    pub mean_secs: f64,
    pub std_secs: f64,
    pub mean_accuracy: f64,
}

/// Seconds per training epoch on a synthetic dataset of `nodes` nodes.
#[derive(Clone, Debug, Serialize)]
pub struct ScalePoint {
    pub nodes: usize,
    pub secs_per_epoch: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TimingReport {
    pub dataset: String,
    pub config: ExperimentConfig,
    pub warnings: Vec<String>,
    pub variants: Vec<TimingVariant>,
    pub scaling: Vec<ScalePoint>,
}

impl TimingReport {
    pub fn records(&self) -> Vec<Value> {
        let mut out = Vec::new();
        for v in &self.variants {
            out.push(json!({"record": "timing", "dataset": self.dataset,
                "variant": v.variant, "mean_secs": v.mean_secs, "std_secs": v.std_secs,
                "per_seed_secs": v.per_seed_secs, "mean_accuracy": v.mean_accuracy}));
        }
        for p in &self.scaling {
            out.push(json!({"record": "scaling", "nodes": p.nodes,
                "secs_per_epoch": p.secs_per_epoch}));
        }
        out.push(json!({"record": "summary", "dataset": self.dataset,
            "seeds": self.config.seeds, "config": self.config, "warnings": self.warnings}));
        out
    }

    pub fn summary_text(&self) -> String {
        let mut s = format!(
            "{} — training time over {} seed(s)\n",
            self.dataset,
            self.config.seeds.len()
        );
        for v in &self.variants {
            s.push_str(&format!(
                "  {:<15} {:.1}s ± {:.1}s (mean accuracy {}%)\n",
                v.variant,
                v.mean_secs,
                v.std_secs,
                pct(v.mean_accuracy)
            ));
        }
        s.push_str("  synthetic size scaling (per training epoch):\n");
        for p in &self.scaling {
            s.push_str(&format!("    n = {:>5}: {:.3}s\n", p.nodes, p.secs_per_epoch));
        }
        s
    }
}

/// Times full training against the no-refinement variant on every seed, and
/// appends a synthetic size sweep for the quadratic-cost check.
pub fn run_timing(cfg: &ExperimentConfig, sizes: &[usize]) -> Result<TimingReport> {
    let (ds, warnings) = load_dataset(cfg)?;
    let mut variants = Vec::new();
    for (name, mode) in
        [("full", AblationMode::Full), ("no-refinement", AblationMode::NoIterative)]
    {
        let set = run_seeds(
            &ds,
            cfg,
            |seed| ablation_mode(&cfg.run_config(seed), mode),
            Split::Test,
        )?;
        if let Some(f) = set.failures.first() {
            return Err(CliError::numerical(format!(
                "timing run for seed {} aborted: {}",
                f.seed, f.error
            )));
        }
        let secs: Vec<f64> = set.runs.iter().map(|r| r.wall_secs).collect();
        let (mean_secs, std_secs) = mean_std(&secs);
        variants.push(TimingVariant {
            variant: name.to_owned(),
            per_seed_secs: secs,
            mean_secs,
            std_secs,
            mean_accuracy: set.mean_accuracy,
        });
    }

    let mut scaling = Vec::new();
    for &n in sizes {
        scaling.push(scale_point(n)?);
    }
    Ok(TimingReport { dataset: ds.name.clone(), config: cfg.clone(), warnings, variants, scaling })
}

/// Times a few training epochs of a fixed small model on a deterministic
/// synthetic dataset of `n` nodes.
fn scale_point(n: usize) -> Result<ScalePoint> {
    use glearn_core::dataset::{make_splits, standardize_columns, SplitCounts};

    const CLASSES: usize = 4;
    const DIM: usize = 16;
    const EPOCHS: usize = 3;
    if n < 4 * CLASSES {
        return Err(CliError::usage(format!("scaling size {n} is too small")));
    }
    let raw = Mat::from_fn(n, DIM, |i, j| {
        (i % CLASSES) as f64 * 2.0 + ((i * 31 + j * 17) % 7) as f64 * 0.05
    });
    let labels: Rc<[u32]> = (0..n).map(|i| (i % CLASSES) as u32).collect();
    let mut ds =
        Dataset::new("synthetic", standardize_columns(&raw), labels, CLASSES, None)?;
    let counts = SplitCounts { train: n / 4, dev: n / 4, test: n - 2 * (n / 4) };
    let draw = make_splits(&ds, counts, 0)?;
    ds.set_splits(draw.masks)?;

    let rc = RunConfig {
        knn: 8,
        heads: 2,
        epsilon: 0.3,
        max_iters: 2,
        max_epochs: EPOCHS,
        patience: EPOCHS,
        ..RunConfig::default()
    };
    let started = Instant::now();
    fit(&ds, &rc)?;
    Ok(ScalePoint { nodes: n, secs_per_epoch: started.elapsed().as_secs_f64() / EPOCHS as f64 })
}
