//! The full training and evaluation loop.
//!
//! One forward pass ([`forward_pass`]) runs the whole joint procedure: build
//! an adjacency from raw features with the weighted cosine metric, mix it
//! with the normalized starting graph, classify with the two-layer GCN, and
//! then refine — each round rebuilds the adjacency from the previous round's
//! node embeddings — until the adjacency stops moving ([`stopping_check`])
//! or the round budget runs out. Every round contributes its own
//! prediction + graph-regularization loss; the figure reported (and
//! differentiated) is `L⁽⁰⁾ + mean of the refinement losses`, so metric
//! weights and GCN weights train jointly through all rounds.
//!
//! [`fit`] wraps that in an epoch loop: Adam with coupled weight decay,
//! per-epoch dev-accuracy evaluation, early stopping on patience, and a
//! best-dev parameter snapshot. [`evaluate`] runs an evaluation-mode
//! forward pass (dynamic stopping included) and scores accuracy on a mask.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::gnn::{
    gcn_forward, mix_iterations, mix_with_initial, normalize_initial, prediction_loss, GcnParams,
    GcnVars, MixProvenance, MixedAdjacency,
};
use crate::graphreg::{connectivity_sparsity, dirichlet_energy_with_gram};
use crate::metric::{epsilon_sparsify, knn_graph, multi_head_cosine, MetricParams};
use crate::numkit::{Adam, AdamConfig, Mat, Tape, Var};
use crate::{Error, Result};

/// Every knob of a training/evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Mix weight of the normalized starting graph vs the learned one.
    pub lambda: f64,
    /// Mix weight of the current round's propagation matrix vs round zero's.
    pub eta: f64,
    /// Smoothness (Dirichlet energy) coefficient.
    pub alpha: f64,
    /// Connectivity (log-degree barrier) coefficient.
    pub beta: f64,
    /// Sparsity (squared Frobenius norm) coefficient.
    pub gamma: f64,
    /// Neighbour count for the kNN starting graph, used only when the
    /// dataset ships without one.
    pub knn: usize,
    /// Sparsification threshold on cosine similarities.
    pub epsilon: f64,
    /// Number of metric heads.
    pub heads: usize,
    /// Relative adjacency-change threshold of the refinement loop.
    pub stop_delta: f64,
    /// Refinement round budget per forward pass.
    pub max_iters: usize,
    /// Whether the refinement loop runs at all (disabled by the
    /// no-refinement ablation).
    pub iterate: bool,
    /// Hidden width of the GCN.
    pub hidden: usize,
    /// Dropout between the two GCN layers while training.
    pub dropout: f64,
    /// Dropout on the embedding fed back to the metric while training.
    pub iter_dropout: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without a dev-accuracy improvement before training stops.
    pub patience: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lambda: 0.5,
            eta: 0.5,
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.1,
            knn: 20,
            epsilon: 0.75,
            heads: 4,
            stop_delta: 1e-3,
            max_iters: 10,
            iterate: true,
            hidden: 16,
            dropout: 0.5,
            iter_dropout: 0.5,
            learning_rate: 0.01,
            weight_decay: 5e-4,
            max_epochs: 1000,
            patience: 100,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("eta", self.eta)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if !self.epsilon.is_finite() || !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::config(format!("epsilon = {} outside [0, 1)", self.epsilon)));
        }
        if self.heads == 0 {
            return Err(Error::config("heads must be positive"));
        }
        if !self.stop_delta.is_finite() || self.stop_delta <= 0.0 {
            return Err(Error::config(format!(
                "stop_delta = {} must be finite and > 0",
                self.stop_delta
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::config("max_iters must be >= 1"));
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden width must be positive"));
        }
        for (name, v) in [("dropout", self.dropout), ("iter_dropout", self.iter_dropout)] {
            if !v.is_finite() || !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} outside [0, 1)")));
            }
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config(format!(
                "learning_rate = {} must be finite and > 0",
                self.learning_rate
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::config(format!(
                "weight_decay = {} must be finite and >= 0",
                self.weight_decay
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be >= 1"));
        }
        Ok(())
    }

    /// True when any loss term actually depends on the learned adjacency,
    /// i.e. when the metric weights receive gradient.
    fn learns_structure(&self) -> bool {
        self.lambda < 1.0 || self.reg_on()
    }

    fn reg_on(&self) -> bool {
        self.alpha > 0.0 || self.beta > 0.0 || self.gamma > 0.0
    }

    /// True when the forward pass must build learned adjacencies at all.
    /// False exactly for the plain-GCN baseline (λ = 1, no regularization,
    /// no refinement), where the metric would be dead weight.
    fn needs_metric(&self) -> bool {
        self.learns_structure() || self.iterate
    }

    fn effective_max_iters(&self) -> usize {
        if self.iterate {
            self.max_iters
        } else {
            0
        }
    }
}

/// The model variants compared in the component studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    /// The model as configured.
    Full,
    /// Graph regularization off: α = β = γ = 0.
    NoGraphReg,
    /// Refinement loop off: the initialization pass is the whole forward.
    NoIterative,
}

/// Applies an ablation to a base configuration.
pub fn ablation_mode(config: &RunConfig, mode: AblationMode) -> RunConfig {
    let mut out = config.clone();
    match mode {
        AblationMode::Full => {}
        AblationMode::NoGraphReg => {
            out.alpha = 0.0;
            out.beta = 0.0;
            out.gamma = 0.0;
        }
        AblationMode::NoIterative => {
            out.iterate = false;
        }
    }
    out
}

/// All learnable state: GCN weights plus the two metrics (one scoring raw
/// features for the initial adjacency, one scoring hidden embeddings
/// inside the refinement loop).
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub gcn: GcnParams,
    pub metric_input: MetricParams,
    pub metric_embed: MetricParams,
}

/// Draws fresh parameters. The draw order (GCN layer 1, GCN layer 2,
/// input metric, embedding metric) is fixed so a seed pins every value.
pub fn init_params<R: Rng>(
    dataset: &Dataset,
    config: &RunConfig,
    rng: &mut R,
) -> Result<ModelParams> {
    config.validate()?;
    let gcn = GcnParams::init(
        dataset.feature_dim(),
        config.hidden,
        dataset.classes,
        config.dropout,
        config.iter_dropout,
        rng,
    )?;
    let metric_input =
        MetricParams::init(config.heads, dataset.feature_dim(), config.epsilon, rng)?;
    let metric_embed = MetricParams::init(config.heads, config.hidden, config.epsilon, rng)?;
    Ok(ModelParams { gcn, metric_input, metric_embed })
}

/// Why the refinement loop ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// The adjacency change fell to (or below) the threshold.
    Converged,
    /// The round budget ran out first.
    MaxIters,
}

/// Outcome of [`stopping_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopCheck {
    /// Whether another refinement round should run.
    pub proceed: bool,
    /// Why not, when `proceed` is false.
    pub reason: Option<StopReason>,
    /// Set when the reference adjacency is all zeros and the threshold
    /// degenerated to exactly zero.
    pub zero_reference: bool,
}

/// Decides whether refinement round `t + 1` should run: continue iff
/// (`t == 0` or `‖A⁽ᵗ⁾ − A⁽ᵗ⁻¹⁾‖²_F > δ·‖A⁽⁰⁾‖²_F`) and `t < max_iters`.
///
/// A zero reference adjacency degenerates the threshold to zero — the loop
/// then stops only when consecutive adjacencies are exactly equal — and is
/// flagged via `zero_reference`. When both exit conditions hold at once,
/// convergence wins over the round budget.
pub fn stopping_check(
    a_t: &Mat,
    a_prev: Option<&Mat>,
    a_0: &Mat,
    delta: f64,
    t: usize,
    max_iters: usize,
) -> Result<StopCheck> {
    if !delta.is_finite() || delta <= 0.0 {
        return Err(Error::config(format!("stop_delta = {delta} must be finite and > 0")));
    }
    if t == 0 {
        let proceed = max_iters > 0;
        return Ok(StopCheck {
            proceed,
            reason: if proceed { None } else { Some(StopReason::MaxIters) },
            zero_reference: false,
        });
    }
    let prev = a_prev.ok_or_else(|| {
        Error::contract("stopping_check: rounds past the first need the previous adjacency")
    })?;
    if a_t.shape() != prev.shape() || a_t.shape() != a_0.shape() {
        return Err(Error::contract(format!(
            "stopping_check: shapes disagree ({:?} vs {:?} vs {:?})",
            a_t.shape(),
            prev.shape(),
            a_0.shape()
        )));
    }
    let reference = a_0.frob_sq();
    let threshold = delta * reference;
    let diff = Mat::frob_dist_sq(a_t, prev);
    let converged = diff <= threshold;
    let proceed = !converged && t < max_iters;
    let reason = if proceed {
        None
    } else if converged {
        Some(StopReason::Converged)
    } else {
        Some(StopReason::MaxIters)
    };
    Ok(StopCheck { proceed, reason, zero_reference: reference == 0.0 })
}

/// Relative adjacency change `‖A⁽ᵗ⁾ − A⁽ᵗ⁻¹⁾‖²_F / ‖A⁽ᵗ⁾‖²_F`, the
/// per-round convergence diagnostic. `None` when the current adjacency is
/// all zeros (the quotient is undefined there, and a marker is more honest
/// than a number).
pub fn delta_a(a_t: &Mat, a_prev: &Mat) -> Result<Option<f64>> {
    if a_t.shape() != a_prev.shape() {
        return Err(Error::contract(format!(
            "delta_a: shapes disagree ({:?} vs {:?})",
            a_t.shape(),
            a_prev.shape()
        )));
    }
    let norm = a_t.frob_sq();
    if norm == 0.0 {
        return Ok(None);
    }
    Ok(Some(Mat::frob_dist_sq(a_t, a_prev) / norm))
}

/// Diagnostics of one pass (the initialization pass or one refinement
/// round) inside a forward run.
#[derive(Clone, Debug)]
pub struct PassRecord {
    /// Masked cross-entropy of this pass's predictions.
    pub prediction_loss: f64,
    /// Graph-regularization value on this pass's learned adjacency
    /// (0 when regularization is off).
    pub graph_loss: f64,
    /// Relative adjacency change vs the previous round; `None` for the
    /// initialization pass and when the current adjacency is all zeros.
    pub delta_a: Option<f64>,
    /// `‖A‖²_F` of the learned adjacency; `None` when the pass built none
    /// (plain-GCN baseline).
    pub adjacency_frob_sq: Option<f64>,
    /// Nonzero entries of the learned adjacency.
    pub adjacency_support: Option<usize>,
    /// Per-node argmax predictions of this pass.
    pub predictions: Vec<u32>,
    /// The learned adjacency itself, kept only on request.
    pub adjacency: Option<Mat>,
}

/// Full diagnostics of one forward run: the initialization pass, every
/// refinement round, and how the loop ended. The reported loss equals
/// `init loss + mean of round losses` (recomputable from the records).
#[derive(Clone, Debug)]
pub struct IterationTrace {
    pub init: PassRecord,
    pub steps: Vec<PassRecord>,
    pub stop_reason: StopReason,
    pub total_loss: f64,
    pub warnings: Vec<String>,
}

/// Knobs of a single forward run.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    /// Training mode samples dropout; evaluation mode is deterministic.
    pub training: bool,
    /// Keep every learned adjacency in the trace (memory-hungry).
    pub keep_matrices: bool,
}

impl ForwardOptions {
    pub fn evaluation() -> Self {
        ForwardOptions { training: false, keep_matrices: false }
    }

    pub fn training() -> Self {
        ForwardOptions { training: true, keep_matrices: false }
    }
}

/// Result of a standalone forward run.
#[derive(Clone, Debug)]
pub struct ForwardOutcome {
    /// Final class probabilities, one row per node.
    pub probabilities: Mat,
    /// Final per-node argmax predictions.
    pub predictions: Vec<u32>,
    /// Joint loss (initialization + mean of refinement rounds).
    pub loss: f64,
    pub trace: IterationTrace,
}

/// Inputs that stay fixed across epochs: the normalized starting graph and
/// (when smoothness is on) the feature Gram matrix with its diagonal.
struct Prepared {
    l0: Rc<Mat>,
    features: Rc<Mat>,
    gram: Option<Rc<Mat>>,
    sq_norms: Option<Rc<Mat>>,
    warnings: Vec<String>,
}

fn prepare(dataset: &Dataset, config: &RunConfig) -> Result<Prepared> {
    let mut warnings = Vec::new();
    let a0 = match &dataset.initial_adjacency {
        Some(a0) => a0.clone(),
        None => {
            if config.knn == 0 {
                return Err(Error::config(format!(
                    "dataset {} has no starting graph; set a positive neighbour count",
                    dataset.name
                )));
            }
            let g = knn_graph(&dataset.features, config.knn)?;
            if g.effective_k != config.knn {
                warnings.push(format!(
                    "kNN starting graph: neighbour count clamped from {} to {} ({} nodes)",
                    config.knn,
                    g.effective_k,
                    dataset.nodes()
                ));
            }
            g.adjacency
        }
    };
    let l0 = Rc::new(normalize_initial(&a0)?);
    let (gram, sq_norms) = if config.alpha > 0.0 {
        let g = dataset.features.gram(1.0);
        let sqn = Mat::from_fn(g.rows(), 1, |i, _| g[(i, i)]);
        (Some(Rc::new(g)), Some(Rc::new(sqn)))
    } else {
        (None, None)
    };
    Ok(Prepared {
        l0,
        features: Rc::new(dataset.features.clone()),
        gram,
        sq_norms,
        warnings,
    })
}

/// Tape handles of everything a forward run touches.
struct Placed {
    w1: Var,
    w2: Var,
    metric_input: Option<Var>,
    metric_embed: Option<Var>,
    x: Var,
    l0: Var,
    gram: Option<Var>,
    sq_norms: Option<Var>,
}

/// Registers parameters (as gradient leaves only where gradient can flow
/// and `trainable` is set) and the fixed inputs on a fresh tape.
fn place(tape: &mut Tape, params: &ModelParams, prep: &Prepared, config: &RunConfig, trainable: bool) -> Placed {
    let param = |tape: &mut Tape, m: &Mat, learnable: bool| {
        if trainable && learnable {
            tape.leaf(m.clone())
        } else {
            tape.constant(m.clone())
        }
    };
    let w1 = param(tape, &params.gcn.w1, true);
    let w2 = param(tape, &params.gcn.w2, true);
    let metric_input = config
        .needs_metric()
        .then(|| param(tape, &params.metric_input.weights, config.learns_structure()));
    let metric_embed = config
        .iterate
        .then(|| param(tape, &params.metric_embed.weights, config.learns_structure()));
    Placed {
        w1,
        w2,
        metric_input,
        metric_embed,
        x: tape.constant_rc(Rc::clone(&prep.features)),
        l0: tape.constant_rc(Rc::clone(&prep.l0)),
        gram: prep.gram.as_ref().map(|g| tape.constant_rc(Rc::clone(g))),
        sq_norms: prep.sq_norms.as_ref().map(|s| tape.constant_rc(Rc::clone(s))),
    }
}

/// Graph-regularization loss `α·Ω + (−β/n)·1ᵀlog(A1) + (γ/n²)·‖A‖²_F` on a
/// learned adjacency, using the precomputed feature Gram for Ω.
fn graph_loss(tape: &mut Tape, adjacency: Var, placed: &Placed, config: &RunConfig) -> Result<Var> {
    let (rest, _floored) = connectivity_sparsity(tape, adjacency, config.beta, config.gamma)?;
    if config.alpha == 0.0 {
        return Ok(rest);
    }
    let gram = placed.gram.expect("gram is prepared whenever alpha > 0");
    let sqn = placed.sq_norms.expect("sq_norms is prepared whenever alpha > 0");
    let omega = dirichlet_energy_with_gram(tape, adjacency, gram, sqn)?;
    Ok(tape.add_scaled(omega, rest, config.alpha, 1.0))
}

fn row_argmax(probs: &Mat) -> Vec<u32> {
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0usize;
            let mut best_v = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

struct ForwardArtifacts {
    loss: Var,
    probabilities: Rc<Mat>,
    predictions: Vec<u32>,
    trace: IterationTrace,
}

/// The actual forward computation, shared by training and evaluation.
fn run_forward<R: Rng>(
    tape: &mut Tape,
    placed: &Placed,
    dataset: &Dataset,
    config: &RunConfig,
    opts: ForwardOptions,
    rng: &mut R,
) -> Result<ForwardArtifacts> {
    let labels = Rc::clone(&dataset.labels);
    let train_mask = Rc::clone(&dataset.splits.train);
    if train_mask.is_empty() {
        return Err(Error::contract(
            "forward pass needs a nonempty train mask for the prediction loss",
        ));
    }
    let weights = GcnVars { w1: placed.w1, w2: placed.w2 };
    let mut warnings: Vec<String> = Vec::new();

    // Initialization pass: adjacency from raw features (unless this is the
    // plain-GCN baseline, which propagates on the starting graph alone).
    let (a_init, mixed_init) = match placed.metric_input {
        Some(metric) => {
            let sims = multi_head_cosine(tape, metric, placed.x)?;
            let a = epsilon_sparsify(tape, sims, config.epsilon)?;
            let mixed = mix_with_initial(tape, a, placed.l0, config.lambda)?;
            (Some(a), mixed)
        }
        None => (
            None,
            MixedAdjacency { var: placed.l0, provenance: MixProvenance::WithInitial },
        ),
    };
    let out_init = gcn_forward(
        tape,
        mixed_init,
        placed.x,
        weights,
        config.dropout,
        opts.training,
        rng,
    )?;
    let (pred_loss_init, probs_init) =
        prediction_loss(tape, out_init.logits, Rc::clone(&labels), Rc::clone(&train_mask))?;
    let graph_loss_init = match (config.reg_on(), a_init) {
        (true, Some(a)) => Some(graph_loss(tape, a, placed, config)?),
        _ => None,
    };
    let init_loss = match graph_loss_init {
        Some(g) => tape.add_scaled(pred_loss_init, g, 1.0, 1.0),
        None => pred_loss_init,
    };
    if !tape.value(init_loss).scalar_value().is_finite() {
        return Err(Error::numerical(format!(
            "initialization pass produced a non-finite loss ({})",
            tape.value(init_loss).scalar_value()
        )));
    }
    let a_init_mat = a_init.map(|a| tape.rc_value(a));
    let init_record = PassRecord {
        prediction_loss: tape.value(pred_loss_init).scalar_value(),
        graph_loss: graph_loss_init.map_or(0.0, |g| tape.value(g).scalar_value()),
        delta_a: None,
        adjacency_frob_sq: a_init_mat.as_ref().map(|a| a.frob_sq()),
        adjacency_support: a_init_mat.as_ref().map(|a| a.support()),
        predictions: row_argmax(&probs_init),
        adjacency: if opts.keep_matrices {
            a_init_mat.as_ref().map(|a| (**a).clone())
        } else {
            None
        },
    };

    // Refinement loop: each round scores the previous round's embeddings.
    let max_iters = config.effective_max_iters();
    let mut steps: Vec<PassRecord> = Vec::new();
    let mut losses: Vec<Var> = Vec::new();
    let mut probabilities = probs_init;
    let mut predictions = init_record.predictions.clone();
    let mut embedding = out_init.hidden;
    let mut a_latest = a_init_mat.clone();
    let mut a_prior: Option<Rc<Mat>> = None;
    let mut warned_zero_reference = false;
    let stop_reason;
    let mut t = 0usize;
    loop {
        let check = if t == 0 {
            StopCheck {
                proceed: max_iters > 0,
                reason: if max_iters > 0 { None } else { Some(StopReason::MaxIters) },
                zero_reference: false,
            }
        } else {
            stopping_check(
                a_latest.as_ref().expect("rounds ran, so the latest adjacency exists"),
                a_prior.as_deref(),
                a_init_mat.as_ref().expect("rounds run only when the metric is placed"),
                config.stop_delta,
                t,
                max_iters,
            )?
        };
        if check.zero_reference && !warned_zero_reference {
            warnings.push(String::from(
                "the initial learned adjacency is all zeros; the stopping threshold \
                 degenerated to zero (the loop stops only on exactly equal adjacencies)",
            ));
            warned_zero_reference = true;
        }
        if !check.proceed {
            stop_reason = check.reason.expect("a stopped check always carries a reason");
            break;
        }

        let metric = placed.metric_embed.expect("refinement requires the embedding metric");
        let z_in = if opts.training && config.iter_dropout > 0.0 {
            tape.dropout(embedding, config.iter_dropout, rng)
        } else {
            embedding
        };
        let sims = multi_head_cosine(tape, metric, z_in)?;
        let a_t = epsilon_sparsify(tape, sims, config.epsilon)?;
        let mixed_t = mix_with_initial(tape, a_t, placed.l0, config.lambda)?;
        let blended = mix_iterations(tape, mixed_t, mixed_init, config.eta)?;
        let out_t = gcn_forward(
            tape,
            blended,
            placed.x,
            weights,
            config.dropout,
            opts.training,
            rng,
        )?;
        let (pred_loss_t, probs_t) =
            prediction_loss(tape, out_t.logits, Rc::clone(&labels), Rc::clone(&train_mask))?;
        let graph_loss_t = if config.reg_on() {
            Some(graph_loss(tape, a_t, placed, config)?)
        } else {
            None
        };
        let loss_t = match graph_loss_t {
            Some(g) => tape.add_scaled(pred_loss_t, g, 1.0, 1.0),
            None => pred_loss_t,
        };
        let loss_value = tape.value(loss_t).scalar_value();
        if !loss_value.is_finite() {
            return Err(Error::numerical(format!(
                "refinement round {} produced a non-finite loss ({loss_value})",
                t + 1
            )));
        }

        let a_t_mat = tape.rc_value(a_t);
        let record = PassRecord {
            prediction_loss: tape.value(pred_loss_t).scalar_value(),
            graph_loss: graph_loss_t.map_or(0.0, |g| tape.value(g).scalar_value()),
            delta_a: delta_a(
                &a_t_mat,
                a_latest.as_ref().expect("round ran, so an earlier adjacency exists"),
            )?,
            adjacency_frob_sq: Some(a_t_mat.frob_sq()),
            adjacency_support: Some(a_t_mat.support()),
            predictions: row_argmax(&probs_t),
            adjacency: if opts.keep_matrices { Some((*a_t_mat).clone()) } else { None },
        };
        predictions = record.predictions.clone();
        probabilities = probs_t;
        steps.push(record);
        losses.push(loss_t);
        embedding = out_t.hidden;
        a_prior = a_latest;
        a_latest = Some(a_t_mat);
        t += 1;
    }

    // L = L⁽⁰⁾ + (Σ round losses) / round count.
    let loss = if losses.is_empty() {
        init_loss
    } else {
        let mut sum = losses[0];
        for &l in &losses[1..] {
            sum = tape.add_scaled(sum, l, 1.0, 1.0);
        }
        tape.add_scaled(init_loss, sum, 1.0, 1.0 / losses.len() as f64)
    };
    let total_loss = tape.value(loss).scalar_value();
    if !total_loss.is_finite() {
        return Err(Error::numerical(format!(
            "aggregated joint loss is non-finite ({total_loss})"
        )));
    }

    Ok(ForwardArtifacts {
        loss,
        probabilities,
        predictions,
        trace: IterationTrace {
            init: init_record,
            steps,
            stop_reason,
            total_loss,
            warnings,
        },
    })
}

/// Runs the whole joint forward procedure on freshly placed parameters and
/// returns predictions, the joint loss, and the per-round trace.
pub fn forward_pass<R: Rng>(
    dataset: &Dataset,
    params: &ModelParams,
    config: &RunConfig,
    opts: ForwardOptions,
    rng: &mut R,
) -> Result<ForwardOutcome> {
    config.validate()?;
    let prep = prepare(dataset, config)?;
    let mut tape = Tape::new();
    let placed = place(&mut tape, params, &prep, config, false);
    let mut art = run_forward(&mut tape, &placed, dataset, config, opts, rng)?;
    for (i, w) in prep.warnings.into_iter().enumerate() {
        art.trace.warnings.insert(i, w);
    }
    Ok(ForwardOutcome {
        probabilities: (*art.probabilities).clone(),
        predictions: art.predictions,
        loss: art.trace.total_loss,
        trace: art.trace,
    })
}

/// Fraction of masked nodes whose prediction matches the label.
pub fn accuracy(predictions: &[u32], labels: &[u32], mask: &[u32]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::contract("accuracy: empty node mask"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "accuracy: {} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut hits = 0usize;
    for &i in mask {
        let i = i as usize;
        if i >= labels.len() {
            return Err(Error::contract(format!(
                "accuracy: mask index {i} outside [0, {})",
                labels.len()
            )));
        }
        if predictions[i] == labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / mask.len() as f64)
}

/// Mean negative log-likelihood of the labeled rows in `mask`.
fn masked_nll(probabilities: &Mat, labels: &[u32], mask: &[u32]) -> f64 {
    let mut sum = 0.0;
    for &i in mask {
        sum -= crate::numkit::ln(probabilities[(i as usize, labels[i as usize] as usize)]);
    }
    sum / mask.len() as f64
}

/// Evaluation-mode forward pass (dynamic stopping included, no dropout),
/// scored as accuracy over `mask`.
pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    mask: &[u32],
    config: &RunConfig,
) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::contract("evaluate: empty node mask"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0); // never drawn from in evaluation mode
    let out = forward_pass(dataset, params, config, ForwardOptions::evaluation(), &mut rng)?;
    accuracy(&out.predictions, &dataset.labels, mask)
}

/// One epoch's summary in a training history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub train_loss: f64,
    pub dev_accuracy: f64,
    /// Mean cross-entropy over the dev mask; breaks dev-accuracy ties when
    /// the snapshot epoch is picked (small dev sets saturate accuracy early,
    /// long before the parameters settle).
    pub dev_loss: f64,
}

/// What [`fit`] did: per-epoch records, which epoch won on dev accuracy,
/// and whether training was cut short by a numerical failure.
#[derive(Clone, Debug)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the returned parameter snapshot: highest dev accuracy, ties
    /// broken by lower dev loss, remaining ties by the earlier epoch.
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    /// Set when training aborted on a non-finite value; the history covers
    /// the epochs that completed before that.
    pub divergence: Option<String>,
    pub warnings: Vec<String>,
}

/// Trains a fresh model: Adam on the joint loss, per-epoch dev evaluation,
/// early stopping on patience, best-dev parameter snapshot returned.
/// Deterministic per seed.
pub fn fit(dataset: &Dataset, config: &RunConfig) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = init_params(dataset, config, &mut rng)?;
    fit_from(params, &mut rng, dataset, config)
}

/// Training loop body, separated so tests can inject starting parameters.
fn fit_from<R: Rng>(
    mut params: ModelParams,
    rng: &mut R,
    dataset: &Dataset,
    config: &RunConfig,
) -> Result<(ModelParams, TrainHistory)> {
    if dataset.splits.train.is_empty() || dataset.splits.dev.is_empty() {
        return Err(Error::contract(
            "fit needs nonempty train and dev masks; draw or load splits first",
        ));
    }
    let prep = prepare(dataset, config)?;
    let mut adam = Adam::new(AdamConfig {
        lr: config.learning_rate,
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    })?;

    let tune_metric_input = config.learns_structure();
    let tune_metric_embed = config.learns_structure() && config.iterate;

    let mut epochs: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(f64, f64, usize, ModelParams)> = None;
    // Highest dev accuracy seen so far and the epoch that first reached it;
    // the patience clock runs on this, not on the tie-breaking snapshot.
    let mut plateau: Option<(f64, usize)> = None;
    let mut divergence: Option<String> = None;
    let mut warnings: Vec<String> = prep.warnings.clone();

    for epoch in 0..config.max_epochs {
        // Training pass with gradient.
        let mut tape = Tape::new();
        let placed = place(&mut tape, &params, &prep, config, true);
        let art = match run_forward(
            &mut tape,
            &placed,
            dataset,
            config,
            ForwardOptions::training(),
            rng,
        ) {
            Ok(art) => art,
            Err(Error::Numerical(msg)) => {
                divergence = Some(format!("epoch {epoch} training pass: {msg}"));
                break;
            }
            Err(other) => return Err(other),
        };
        if epoch == 0 {
            warnings.extend(art.trace.warnings.iter().cloned());
        }
        let train_loss = art.trace.total_loss;

        let mut grads = tape.backward(art.loss)?;
        let g_w1 = grads
            .take(placed.w1)
            .ok_or_else(|| Error::contract("first GCN layer received no gradient"))?;
        let g_w2 = grads
            .take(placed.w2)
            .ok_or_else(|| Error::contract("second GCN layer received no gradient"))?;
        let g_mx = if tune_metric_input {
            let v = placed.metric_input.expect("metric placed whenever it is tuned");
            Some(grads.take(v).ok_or_else(|| {
                Error::contract("input metric should receive gradient under this config")
            })?)
        } else {
            None
        };
        let g_mz = if tune_metric_embed {
            let v = placed.metric_embed.expect("metric placed whenever it is tuned");
            Some(grads.take(v).ok_or_else(|| {
                Error::contract("embedding metric should receive gradient under this config")
            })?)
        } else {
            None
        };
        drop(tape);

        let mut updates: Vec<(&str, &mut Mat, &Mat)> = Vec::with_capacity(4);
        updates.push(("gcn-layer-1", &mut params.gcn.w1, &g_w1));
        updates.push(("gcn-layer-2", &mut params.gcn.w2, &g_w2));
        if let Some(g) = &g_mx {
            updates.push(("metric-input", &mut params.metric_input.weights, g));
        }
        if let Some(g) = &g_mz {
            updates.push(("metric-embedding", &mut params.metric_embed.weights, g));
        }
        if let Err(e) = adam.step(&mut updates) {
            match e {
                Error::Numerical(msg) => {
                    divergence = Some(format!("epoch {epoch} optimizer step: {msg}"));
                    break;
                }
                other => return Err(other),
            }
        }

        // Dev evaluation of the updated parameters.
        let mut eval_tape = Tape::new();
        let eval_placed = place(&mut eval_tape, &params, &prep, config, false);
        let mut eval_rng = ChaCha8Rng::seed_from_u64(0); // never drawn from
        let eval = match run_forward(
            &mut eval_tape,
            &eval_placed,
            dataset,
            config,
            ForwardOptions::evaluation(),
            &mut eval_rng,
        ) {
            Ok(art) => art,
            Err(Error::Numerical(msg)) => {
                divergence = Some(format!("epoch {epoch} dev evaluation: {msg}"));
                break;
            }
            Err(other) => return Err(other),
        };
        let dev_accuracy = accuracy(&eval.predictions, &dataset.labels, &dataset.splits.dev)?;
        drop(eval_tape);

        let dev_loss = masked_nll(&eval.probabilities, &dataset.labels, &dataset.splits.dev);
        epochs.push(EpochRecord { train_loss, dev_accuracy, dev_loss });
        let snapshot_better = best.as_ref().is_none_or(|(acc, loss, _, _)| {
            dev_accuracy > *acc || (dev_accuracy == *acc && dev_loss < *loss)
        });
        if snapshot_better {
            best = Some((dev_accuracy, dev_loss, epoch, params.clone()));
        }
        if plateau.is_none_or(|(acc, _)| dev_accuracy > acc) {
            plateau = Some((dev_accuracy, epoch));
        } else if let Some((_, since)) = plateau {
            if epoch - since >= config.patience {
                break;
            }
        }
    }

    match best {
        Some((best_dev_accuracy, _, best_epoch, snapshot)) => Ok((
            snapshot,
            TrainHistory { epochs, best_epoch, best_dev_accuracy, divergence, warnings },
        )),
        None => Err(Error::numerical(format!(
            "training diverged before completing a single epoch: {}",
            divergence.unwrap_or_else(|| String::from("no diagnostic recorded"))
        ))),
    }
}
