//! Two-layer graph convolution and the adjacency plumbing around it.
//!
//! The propagation matrix fed to the convolution is assembled in stages:
//! the fixed starting graph is symmetrically normalized once
//! ([`normalize_initial`]), every learned adjacency is blended with that
//! normalization ([`mix_with_initial`]), and later refinement rounds blend
//! their matrix with the round-zero one ([`mix_iterations`]). The
//! convolution itself ([`gcn_forward`]) is `softmax(Ā·ReLU(Ā X W₁)·W₂)`
//! with inverted dropout between the layers during training, and
//! [`prediction_loss`] scores it by mean cross-entropy over a node mask,
//! fused with the softmax for numerical stability.

use alloc::format;
use alloc::rc::Rc;

use rand::Rng;

use crate::numkit::{Mat, Tape, Var};
use crate::{Error, Result, EPS_FLOOR};

/// Learnable weights and dropout configuration of the two-layer GCN.
#[derive(Clone, Debug)]
pub struct GcnParams {
    /// First-layer weights, `d_in × d_hidden`.
    pub w1: Mat,
    /// Second-layer weights, `d_hidden × classes`.
    pub w2: Mat,
    /// Dropout rate applied between the two layers while training.
    pub dropout: f64,
    /// Dropout rate applied to the hidden embedding that seeds the next
    /// refinement round (0 disables it).
    pub iter_dropout: f64,
}

impl GcnParams {
    /// Glorot-uniform weights: entries uniform on `±√(6/(fan_in+fan_out))`.
    pub fn init<R: Rng>(
        d_in: usize,
        d_hidden: usize,
        classes: usize,
        dropout: f64,
        iter_dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if d_in == 0 || d_hidden == 0 || classes < 2 {
            return Err(Error::config(format!(
                "gcn init: need positive dims and >= 2 classes, got {d_in}/{d_hidden}/{classes}"
            )));
        }
        for (name, rate) in [("dropout", dropout), ("iteration dropout", iter_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::config(format!("{name} rate {rate} outside [0, 1)")));
            }
        }
        let mut glorot = |rows: usize, cols: usize| {
            let limit = crate::numkit::sqrt(6.0 / (rows + cols) as f64);
            Mat::from_fn(rows, cols, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * limit)
        };
        let w1 = glorot(d_in, d_hidden);
        let w2 = glorot(d_hidden, classes);
        Ok(GcnParams { w1, w2, dropout, iter_dropout })
    }
}

/// Which blending rule produced a [`MixedAdjacency`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixProvenance {
    /// Learned adjacency blended with the normalized starting graph.
    WithInitial,
    /// Current round blended with the round-zero propagation matrix.
    AcrossIterations,
}

/// A propagation matrix living on the tape, tagged with how it was made.
///
/// The tag lets [`mix_iterations`] insist that both of its inputs came from
/// [`mix_with_initial`], which is the only composition the training loop
/// is defined over.
#[derive(Clone, Copy, Debug)]
pub struct MixedAdjacency {
    pub var: Var,
    pub provenance: MixProvenance,
}

/// Symmetric renormalization of the starting graph with self-loops:
/// `(A₀ + I)` scaled entrywise by `1/√(deg_i·deg_j)`.
///
/// Self-loops guarantee strictly positive degrees, so this never divides
/// by zero; an all-zero graph comes out as the identity. Requires a
/// square, symmetric, nonnegative matrix with a zero diagonal (self-loops
/// are added here, not by the caller).
pub fn normalize_initial(a0: &Mat) -> Result<Mat> {
    let (n, m) = a0.shape();
    if n == 0 || n != m {
        return Err(Error::contract(format!(
            "starting graph must be square and nonempty, got {n}×{m}"
        )));
    }
    if !a0.all_finite() {
        return Err(Error::numerical("starting graph contains NaN or Inf"));
    }
    for i in 0..n {
        if a0[(i, i)] != 0.0 {
            return Err(Error::contract(format!(
                "starting graph has a self-loop at node {i} (weight {}); self-loops are added during normalization",
                a0[(i, i)]
            )));
        }
        for j in (i + 1)..n {
            if a0[(i, j)] != a0[(j, i)] {
                return Err(Error::contract(format!(
                    "starting graph is asymmetric at ({i}, {j}): {} vs {}",
                    a0[(i, j)],
                    a0[(j, i)]
                )));
            }
            if a0[(i, j)] < 0.0 {
                return Err(Error::contract(format!(
                    "starting graph has a negative weight at ({i}, {j}): {}",
                    a0[(i, j)]
                )));
            }
        }
    }

    let mut degrees = alloc::vec![1.0f64; n]; // the self-loop
    for i in 0..n {
        for (j, &v) in a0.row(i).iter().enumerate() {
            if j != i {
                degrees[i] += v;
            }
        }
    }
    let mut l0 = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let w = if i == j { 1.0 } else { a0[(i, j)] };
            if w != 0.0 {
                l0[(i, j)] = w / crate::numkit::sqrt(degrees[i] * degrees[j]);
            }
        }
    }
    Ok(l0)
}

/// Blends a learned adjacency with the normalized starting graph:
/// `λ·L₀ + (1−λ)·rownorm(A)`.
///
/// Row normalization divides each row by its sum; rows whose sum is
/// (numerically) zero stay zero, leaving such nodes to the `λ·L₀` term,
/// which always carries their self-loop. At `λ = 1` the result is exactly
/// `L₀` and the learned adjacency is not touched at all, which also means
/// no gradient flows into it.
pub fn mix_with_initial(
    tape: &mut Tape,
    learned: Var,
    l0: Var,
    lambda: f64,
) -> Result<MixedAdjacency> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("mixing weight λ = {lambda} outside [0, 1]")));
    }
    let shape = tape.value(learned).shape();
    if shape != tape.value(l0).shape() || shape.0 != shape.1 {
        return Err(Error::contract(format!(
            "mix_with_initial: learned {:?} vs normalized initial {:?}",
            shape,
            tape.value(l0).shape()
        )));
    }
    let var = if lambda == 1.0 {
        l0
    } else {
        let rn = tape.row_normalize(learned, EPS_FLOOR);
        if lambda == 0.0 {
            rn
        } else {
            tape.add_scaled(l0, rn, lambda, 1.0 - lambda)
        }
    };
    Ok(MixedAdjacency { var, provenance: MixProvenance::WithInitial })
}

/// Blends the current round's propagation matrix with the round-zero one:
/// `η·Ã_t + (1−η)·Ã_0`. Both inputs must come from [`mix_with_initial`].
pub fn mix_iterations(
    tape: &mut Tape,
    current: MixedAdjacency,
    initial: MixedAdjacency,
    eta: f64,
) -> Result<MixedAdjacency> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::config(format!("iteration mixing weight η = {eta} outside [0, 1]")));
    }
    for (name, adj) in [("current", current), ("initial", initial)] {
        if adj.provenance != MixProvenance::WithInitial {
            return Err(Error::contract(format!(
                "mix_iterations: {name} input was produced by {:?}, not by the initial-graph mix",
                adj.provenance
            )));
        }
    }
    let var = if eta == 0.0 {
        initial.var
    } else if eta == 1.0 {
        current.var
    } else {
        tape.add_scaled(current.var, initial.var, eta, 1.0 - eta)
    };
    Ok(MixedAdjacency { var, provenance: MixProvenance::AcrossIterations })
}

/// Tape handles of the GCN weights (leaves registered by the caller).
#[derive(Clone, Copy, Debug)]
pub struct GcnVars {
    pub w1: Var,
    pub w2: Var,
}

/// Result of one GCN forward pass.
#[derive(Debug)]
pub struct GcnOutput {
    /// Hidden embedding `ReLU(Ā X W₁)`, before any dropout.
    pub hidden: Var,
    /// Pre-softmax class scores `Ā·drop(hidden)·W₂`.
    pub logits: Var,
    /// Row-softmax of the logits.
    pub probabilities: Mat,
}

/// Two-layer graph convolution: `softmax(Ā·ReLU(Ā X W₁)·W₂)`.
///
/// `dropout` is applied to the hidden layer only while `training` (inverted
/// dropout, so evaluation needs no rescaling); the returned `hidden` is the
/// un-dropped embedding. Aborts with a layer diagnostic if either layer
/// produces a non-finite value.
pub fn gcn_forward<R: Rng>(
    tape: &mut Tape,
    abar: MixedAdjacency,
    x: Var,
    weights: GcnVars,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<GcnOutput> {
    let (n, d) = tape.value(x).shape();
    let (an, am) = tape.value(abar.var).shape();
    let (w1r, hidden_dim) = tape.value(weights.w1).shape();
    let (w2r, classes) = tape.value(weights.w2).shape();
    if an != n || am != n {
        return Err(Error::contract(format!(
            "gcn_forward: adjacency {an}×{am} does not match {n} nodes"
        )));
    }
    if w1r != d || w2r != hidden_dim {
        return Err(Error::contract(format!(
            "gcn_forward: weight shapes {w1r}×{hidden_dim} / {w2r}×{classes} do not chain with features {n}×{d}"
        )));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::config(format!("dropout rate {dropout} outside [0, 1)")));
    }

    let xw = tape.matmul(x, weights.w1);
    let pre = tape.matmul(abar.var, xw);
    // Checked before the ReLU: the activation clamps NaN and -Inf to zero,
    // which would hide a divergence instead of reporting it.
    if !tape.value(pre).all_finite() {
        return Err(Error::numerical(
            "gcn_forward: first layer produced non-finite values (check adjacency and feature scales)",
        ));
    }
    let hidden = tape.relu(pre);
    let dropped = if training && dropout > 0.0 {
        tape.dropout(hidden, dropout, rng)
    } else {
        hidden
    };
    let zw = tape.matmul(dropped, weights.w2);
    let logits = tape.matmul(abar.var, zw);
    if !tape.value(logits).all_finite() {
        return Err(Error::numerical(
            "gcn_forward: second layer produced non-finite logits (possible divergence)",
        ));
    }
    let probabilities = softmax_rows(tape.value(logits));
    Ok(GcnOutput { hidden, logits, probabilities })
}

/// Row-wise stable softmax; bit-identical to the probabilities used by
/// [`prediction_loss`].
pub fn softmax_rows(logits: &Mat) -> Mat {
    let mut out = Mat::zeros(logits.rows(), logits.cols());
    crate::numkit::softmax_rows_into(&mut out, logits);
    out
}

/// Mean cross-entropy of the row-softmax of `logits` over the masked nodes.
///
/// The softmax is fused into the loss for numerical stability; the
/// probability matrix it used is returned alongside, and equals
/// [`softmax_rows`] of the logits bit-for-bit. The mask must be nonempty,
/// strictly increasing, and in range; targets must cover every node.
pub fn prediction_loss(
    tape: &mut Tape,
    logits: Var,
    targets: Rc<[u32]>,
    mask: Rc<[u32]>,
) -> Result<(Var, Rc<Mat>)> {
    tape.softmax_ce(logits, targets, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{grad_check, GradCheckConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn no_rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn empty_graph_normalizes_to_identity() {
        assert_eq!(normalize_initial(&Mat::zeros(3, 3)).unwrap(), Mat::eye(3));
    }

    #[test]
    fn two_node_normalization_oracle() {
        let a0 = Mat::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let l0 = normalize_initial(&a0).unwrap();
        assert_eq!(l0, Mat::filled(2, 2, 0.5));
    }

    #[test]
    fn normalization_preserves_symmetry() {
        let mut rng = no_rng();
        for _ in 0..10 {
            let n = rng.random_range(2..9);
            let mut a0 = Mat::zeros(n, n);
            for i in 0..n {
                for j in (i + 1)..n {
                    if rng.random::<f64>() < 0.5 {
                        let w = rng.random::<f64>() * 2.0;
                        a0[(i, j)] = w;
                        a0[(j, i)] = w;
                    }
                }
            }
            let l0 = normalize_initial(&a0).unwrap();
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(l0[(i, j)].to_bits(), l0[(j, i)].to_bits());
                }
            }
            assert!(l0.iter().all(|&v| v >= 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn normalization_rejects_bad_graphs() {
        assert!(normalize_initial(&Mat::zeros(2, 3)).is_err());
        let asym = Mat::from_vec(2, 2, vec![0.0, 1.0, 0.5, 0.0]);
        assert!(normalize_initial(&asym).is_err());
        let self_loop = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        assert!(normalize_initial(&self_loop).is_err());
        let negative = Mat::from_vec(2, 2, vec![0.0, -1.0, -1.0, 0.0]);
        assert!(normalize_initial(&negative).is_err());
        let mut nan = Mat::zeros(2, 2);
        nan[(0, 1)] = f64::NAN;
        nan[(1, 0)] = f64::NAN;
        assert!(normalize_initial(&nan).is_err());
    }

    #[test]
    fn mixing_oracles() {
        let mut t = Tape::new();
        let a = t.constant(Mat::from_vec(2, 2, vec![0.0, 2.0, 2.0, 0.0]));
        let l0 = t.constant(Mat::eye(2));

        let full = mix_with_initial(&mut t, a, l0, 1.0).unwrap();
        assert_eq!(full.provenance, MixProvenance::WithInitial);
        assert_eq!(t.value(full.var), &Mat::eye(2));

        let none = mix_with_initial(&mut t, a, l0, 0.0).unwrap();
        assert_eq!(t.value(none.var), &Mat::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]));

        let half = mix_with_initial(&mut t, a, l0, 0.5).unwrap();
        assert_eq!(t.value(half.var), &Mat::filled(2, 2, 0.5));

        assert!(mix_with_initial(&mut t, a, l0, 1.5).is_err());
        assert!(mix_with_initial(&mut t, a, l0, -0.1).is_err());
    }

    #[test]
    fn zero_rows_stay_zero_in_the_learned_mix() {
        let mut t = Tape::new();
        // Node 2 is isolated in the learned graph.
        let a = t.constant(Mat::from_vec(
            3,
            3,
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ));
        let l0m = Mat::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let l0 = t.constant(l0m);
        let mixed = mix_with_initial(&mut t, a, l0, 0.4).unwrap();
        let m = t.value(mixed.var);
        // Isolated row = λ·L₀ row: only the self-loop survives.
        assert_eq!(m.row(2), &[0.0, 0.0, 0.4]);
    }

    #[test]
    fn iteration_mix_blends_and_checks_provenance() {
        let mut t = Tape::new();
        let a1 = t.constant(Mat::filled(2, 2, 0.2));
        let a2 = t.constant(Mat::filled(2, 2, 0.6));
        let l0 = t.constant(Mat::eye(2));
        let m1 = mix_with_initial(&mut t, a1, l0, 0.5).unwrap();
        let m2 = mix_with_initial(&mut t, a2, l0, 0.5).unwrap();

        let same = mix_iterations(&mut t, m1, m2, 1.0).unwrap();
        assert_eq!(same.var, m1.var);
        let back = mix_iterations(&mut t, m1, m2, 0.0).unwrap();
        assert_eq!(back.var, m2.var);
        let mean = mix_iterations(&mut t, m1, m2, 0.5).unwrap();
        assert_eq!(mean.provenance, MixProvenance::AcrossIterations);
        for (got, (x, y)) in t
            .value(mean.var)
            .iter()
            .zip(t.value(m1.var).iter().zip(t.value(m2.var).iter()))
        {
            assert!((got - 0.5 * (x + y)).abs() < 1e-15);
        }

        // Outputs of mix_iterations are not valid inputs to it.
        assert!(mix_iterations(&mut t, mean, m2, 0.5).is_err());
        assert!(mix_iterations(&mut t, m1, mean, 0.5).is_err());
        assert!(mix_iterations(&mut t, m1, m2, 1.2).is_err());
    }

    fn random_symmetric_nonneg(n: usize, rng: &mut impl Rng) -> Mat {
        let mut a = Mat::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < 0.6 {
                    let w = rng.random::<f64>();
                    a[(i, j)] = w;
                    a[(j, i)] = w;
                }
            }
        }
        a
    }

    fn small_instance(
        n: usize,
        d: usize,
        hidden: usize,
        classes: usize,
        seed: u64,
    ) -> (Mat, Mat, GcnParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a0 = random_symmetric_nonneg(n, &mut rng);
        let x = Mat::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let params = GcnParams::init(d, hidden, classes, 0.5, 0.5, &mut rng).unwrap();
        (a0, x, params)
    }

    /// Records the full propagation stack for one evaluation pass.
    fn forward_eval(
        t: &mut Tape,
        a0: &Mat,
        x: &Mat,
        params: &GcnParams,
        lambda: f64,
    ) -> GcnOutput {
        let learned = t.constant(random_symmetric_nonneg(x.rows(), &mut no_rng()));
        let l0 = t.constant(normalize_initial(a0).unwrap());
        let mixed = mix_with_initial(t, learned, l0, lambda).unwrap();
        let xv = t.constant(x.clone());
        let w = GcnVars { w1: t.constant(params.w1.clone()), w2: t.constant(params.w2.clone()) };
        gcn_forward(t, mixed, xv, w, params.dropout, false, &mut no_rng()).unwrap()
    }

    #[test]
    fn zero_weights_predict_uniformly() {
        let (a0, x, mut params) = small_instance(5, 3, 4, 3, 1);
        params.w1 = Mat::zeros(3, 4);
        params.w2 = Mat::zeros(4, 3);
        let mut t = Tape::new();
        let out = forward_eval(&mut t, &a0, &x, &params, 0.5);
        let third = 1.0 / 3.0;
        assert!(out.probabilities.iter().all(|&p| p == third));
    }

    #[test]
    fn probability_rows_sum_to_one() {
        let (a0, x, params) = small_instance(7, 4, 5, 3, 2);
        let mut t = Tape::new();
        let out = forward_eval(&mut t, &a0, &x, &params, 0.3);
        for i in 0..7 {
            let s: f64 = out.probabilities.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
        }
    }

    #[test]
    fn identity_adjacency_reduces_to_a_plain_mlp() {
        let (_, x, params) = small_instance(3, 4, 5, 3, 3);
        let mut t = Tape::new();
        // λ = 1 against an empty starting graph gives Ā = I exactly.
        let out = forward_eval(&mut t, &Mat::zeros(3, 3), &x, &params, 1.0);

        // Hand-rolled per-node MLP oracle.
        for i in 0..3 {
            let mut z = alloc::vec![0.0f64; 5];
            for h in 0..5 {
                let mut s = 0.0;
                for j in 0..4 {
                    s += x[(i, j)] * params.w1[(j, h)];
                }
                z[h] = s.max(0.0);
            }
            let mut logits = alloc::vec![0.0f64; 3];
            for (c, l) in logits.iter_mut().enumerate() {
                *l = (0..5).map(|h| z[h] * params.w2[(h, c)]).sum();
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: alloc::vec::Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let norm: f64 = exps.iter().sum();
            for c in 0..3 {
                let want = exps[c] / norm;
                let got = out.probabilities[(i, c)];
                assert!(
                    (want - got).abs() <= 1e-12 * want.abs().max(1.0),
                    "node {i} class {c}: {want} vs {got}"
                );
            }
        }
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let (a0, x, params) = small_instance(6, 3, 4, 3, 4);
        let perm = [2usize, 0, 5, 3, 1, 4];
        let mut t = Tape::new();
        let base = forward_eval(&mut t, &a0, &x, &params, 1.0);
        let base_probs = base.probabilities;
        let base_hidden = t.value(base.hidden).clone();

        let a0p = Mat::from_fn(6, 6, |i, j| a0[(perm[i], perm[j])]);
        let xp = Mat::from_fn(6, 3, |i, j| x[(perm[i], j)]);
        let mut t2 = Tape::new();
        let out = forward_eval(&mut t2, &a0p, &xp, &params, 1.0);
        for i in 0..6 {
            for c in 0..3 {
                let want = base_probs[(perm[i], c)];
                let got = out.probabilities[(i, c)];
                assert!((want - got).abs() <= 1e-12, "probs ({i},{c}): {want} vs {got}");
            }
            for h in 0..4 {
                let want = base_hidden[(perm[i], h)];
                let got = t2.value(out.hidden)[(i, h)];
                assert!((want - got).abs() <= 1e-12, "hidden ({i},{h}): {want} vs {got}");
            }
        }
    }

    #[test]
    fn training_dropout_is_seeded_and_absent_at_eval() {
        let (a0, x, params) = small_instance(6, 3, 8, 3, 5);
        let run = |training: bool, seed: u64| {
            let mut t = Tape::new();
            let l0 = t.constant(normalize_initial(&a0).unwrap());
            let learned = t.constant(random_symmetric_nonneg(6, &mut no_rng()));
            let mixed = mix_with_initial(&mut t, learned, l0, 0.5).unwrap();
            let xv = t.constant(x.clone());
            let w = GcnVars {
                w1: t.constant(params.w1.clone()),
                w2: t.constant(params.w2.clone()),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = gcn_forward(&mut t, mixed, xv, w, 0.5, training, &mut rng).unwrap();
            out.probabilities
        };
        let e1 = run(false, 1);
        let e2 = run(false, 2);
        assert_eq!(e1, e2, "evaluation must ignore the dropout rng");
        let t1 = run(true, 7);
        let t2 = run(true, 7);
        assert_eq!(t1, t2, "same seed must reproduce the same dropout");
        let t3 = run(true, 8);
        assert!(t1 != t3, "different seeds should differ under dropout");
        assert!(e1 != t1, "training dropout must change the output");
    }

    #[test]
    fn non_finite_features_abort_with_a_layer_diagnostic() {
        let (a0, mut x, params) = small_instance(4, 3, 4, 3, 6);
        x[(1, 2)] = f64::INFINITY;
        let mut t = Tape::new();
        let l0 = t.constant(normalize_initial(&a0).unwrap());
        let learned = t.constant(random_symmetric_nonneg(4, &mut no_rng()));
        let mixed = mix_with_initial(&mut t, learned, l0, 0.5).unwrap();
        let xv = t.constant(x);
        let w = GcnVars { w1: t.constant(params.w1.clone()), w2: t.constant(params.w2.clone()) };
        let err = gcn_forward(&mut t, mixed, xv, w, 0.0, false, &mut no_rng()).unwrap_err();
        assert!(format!("{err}").contains("first layer"), "got: {err}");
    }

    #[test]
    fn glorot_init_is_bounded_seeded_and_validated() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = GcnParams::init(20, 16, 3, 0.5, 0.3, &mut rng).unwrap();
        let lim1 = (6.0f64 / 36.0).sqrt();
        assert!(p.w1.iter().all(|&w| w.abs() < lim1));
        let lim2 = (6.0f64 / 19.0).sqrt();
        assert!(p.w2.iter().all(|&w| w.abs() < lim2));

        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let q = GcnParams::init(20, 16, 3, 0.5, 0.3, &mut rng2).unwrap();
        assert_eq!(p.w1, q.w1);
        assert_eq!(p.w2, q.w2);

        assert!(GcnParams::init(0, 16, 3, 0.5, 0.3, &mut rng).is_err());
        assert!(GcnParams::init(20, 0, 3, 0.5, 0.3, &mut rng).is_err());
        assert!(GcnParams::init(20, 16, 1, 0.5, 0.3, &mut rng).is_err());
        assert!(GcnParams::init(20, 16, 3, 1.0, 0.3, &mut rng).is_err());
        assert!(GcnParams::init(20, 16, 3, 0.5, -0.1, &mut rng).is_err());
    }

    #[test]
    fn loss_of_uniform_predictions_is_log_class_count() {
        let n = 5;
        let c = 4;
        let mut t = Tape::new();
        let logits = t.constant(Mat::zeros(n, c));
        let targets: Rc<[u32]> = (0..n as u32).map(|i| i % c as u32).collect();
        let mask: Rc<[u32]> = Rc::from(&[0u32, 2, 4][..]);
        let (loss, probs) = prediction_loss(&mut t, logits, targets, mask).unwrap();
        let got = t.value(loss).scalar_value();
        assert!((got - (c as f64).ln()).abs() < 1e-12, "{got}");
        assert!(probs.iter().all(|&p| p == 1.0 / c as f64));
    }

    #[test]
    fn confident_correct_predictions_drive_the_loss_to_zero() {
        let n = 4;
        let c = 3;
        let targets: alloc::vec::Vec<u32> = alloc::vec![0, 2, 1, 0];
        let logits = Mat::from_fn(n, c, |i, j| if j == targets[i] as usize { 40.0 } else { 0.0 });
        let mut t = Tape::new();
        let lv = t.constant(logits);
        let targets: Rc<[u32]> = targets.into();
        let mask: Rc<[u32]> = (0..n as u32).collect();
        let (loss, _) = prediction_loss(&mut t, lv, targets, mask).unwrap();
        assert!(t.value(loss).scalar_value() < 1e-9);
    }

    #[test]
    fn masked_loss_matches_the_per_node_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 9;
        let c = 4;
        let logits = Mat::from_fn(n, c, |_, _| rng.random::<f64>() * 6.0 - 3.0);
        let targets: Rc<[u32]> =
            (0..n).map(|_| rng.random_range(0..c as u32)).collect();
        let mask: Rc<[u32]> = Rc::from(&[1u32, 3, 4, 7][..]);

        let mut t = Tape::new();
        let lv = t.constant(logits.clone());
        let (loss, probs) =
            prediction_loss(&mut t, lv, Rc::clone(&targets), Rc::clone(&mask)).unwrap();

        // Brute-force mean of per-node −ln ŷ[y] over the mask, using the
        // standalone softmax — must agree to the last bit.
        let standalone = softmax_rows(&logits);
        let mut want = 0.0;
        for &i in mask.iter() {
            want -= standalone[(i as usize, targets[i as usize] as usize)].ln();
        }
        want /= mask.len() as f64;
        assert_eq!(t.value(loss).scalar_value(), want);
        for (a, b) in probs.iter().zip(standalone.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn empty_mask_is_a_contract_violation() {
        let mut t = Tape::new();
        let logits = t.constant(Mat::zeros(3, 2));
        let targets: Rc<[u32]> = Rc::from(&[0u32, 1, 0][..]);
        let mask: Rc<[u32]> = Rc::from(&[][..]);
        assert!(prediction_loss(&mut t, logits, targets, mask).is_err());
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        // Six nodes through the whole stack: mix → two-layer GCN → masked
        // cross-entropy, differentiated w.r.t. the learned adjacency and
        // both weight matrices.
        let n = 6;
        let (a0, x, params) = small_instance(n, 3, 4, 3, 11);
        let learned0 = {
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let mut a = random_symmetric_nonneg(n, &mut rng);
            for i in 0..n {
                let j = (i + 1) % n;
                a[(i, j)] += 0.4;
                a[(j, i)] = a[(i, j)];
            }
            a
        };
        let targets: Rc<[u32]> = Rc::from(&[0u32, 1, 2, 0, 1, 2][..]);
        let mask: Rc<[u32]> = Rc::from(&[0u32, 2, 3, 5][..]);

        // leaf_id: 0 = learned adjacency, 1 = W1, 2 = W2.
        let build = |leaf_id: usize, value: &Mat| -> (f64, Option<Mat>) {
            let mut t = Tape::new();
            let place = |t: &mut Tape, id: usize, base: &Mat| {
                if id == leaf_id {
                    t.leaf(value.clone())
                } else {
                    t.constant(base.clone())
                }
            };
            let learned = place(&mut t, 0, &learned0);
            let w1 = place(&mut t, 1, &params.w1);
            let w2 = place(&mut t, 2, &params.w2);
            let l0 = t.constant(normalize_initial(&a0).unwrap());
            let mixed = mix_with_initial(&mut t, learned, l0, 0.4).unwrap();
            let xv = t.constant(x.clone());
            let out = gcn_forward(
                &mut t,
                mixed,
                xv,
                GcnVars { w1, w2 },
                0.0,
                false,
                &mut no_rng(),
            )
            .unwrap();
            let (loss, _) =
                prediction_loss(&mut t, out.logits, Rc::clone(&targets), Rc::clone(&mask))
                    .unwrap();
            let value = t.value(loss).scalar_value();
            let leaf = [learned, w1, w2][leaf_id];
            let grad = t.backward(loss).unwrap().take(leaf);
            (value, grad)
        };

        for (leaf_id, base, what) in [
            (0usize, &learned0, "learned adjacency"),
            (1, &params.w1, "first-layer weights"),
            (2, &params.w2, "second-layer weights"),
        ] {
            let (_, grad) = build(leaf_id, base);
            let analytic = grad.expect("gradient must exist");
            let mut f = |m: &Mat| build(leaf_id, m).0;
            let report =
                grad_check(&mut f, base, &analytic, &GradCheckConfig::default()).unwrap();
            assert!(report.checked > 0, "{what}: nothing checked");
            assert!(
                report.max_rel_err <= 1e-4,
                "{what}: rel err {} at {:?}",
                report.max_rel_err,
                report.worst
            );
        }
    }

    proptest! {
        #[test]
        fn mixed_rows_obey_the_linear_sum_identity(
            n in 2usize..8,
            lambda in 0.0f64..1.0,
            seed in 0u64..3000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let learned = random_symmetric_nonneg(n, &mut rng);
            let a0 = random_symmetric_nonneg(n, &mut rng);
            let l0m = normalize_initial(&a0).unwrap();
            let mut t = Tape::new();
            let lv = t.constant(learned.clone());
            let l0 = t.constant(l0m.clone());
            let mixed = mix_with_initial(&mut t, lv, l0, lambda).unwrap();
            let m = t.value(mixed.var);
            for i in 0..n {
                let row_sum: f64 = m.row(i).iter().sum();
                let l0_sum: f64 = l0m.row(i).iter().sum();
                let learned_sum: f64 = learned.row(i).iter().sum();
                let want = if learned_sum > EPS_FLOOR {
                    lambda * l0_sum + (1.0 - lambda)
                } else {
                    lambda * l0_sum
                };
                prop_assert!(
                    (row_sum - want).abs() <= 1e-12,
                    "row {}: {} vs {}", i, row_sum, want
                );
            }
        }
    }
}
