//! Differentiable regularizers that keep a learned adjacency well-behaved.
//!
//! Three terms, all recorded on the tape so the adjacency (and, where it
//! appears, the feature matrix) receives gradients:
//!
//! * **Smoothness** — the Dirichlet energy of the features on the graph,
//!   penalizing edges between dissimilar nodes. Evaluated in trace form,
//!   `tr(XᵀLX)/n²`, which is algebraically the half-sum of
//!   `A_ij·‖x_i − x_j‖²` over all pairs but costs two matrix products
//!   instead of a double loop.
//! * **Connectivity** — a log barrier `−(β/n)·Σ log(degree)` that pushes
//!   every node to keep at least some edge mass.
//! * **Sparsity** — `(γ/n²)·‖A‖²_F`, discouraging uniformly dense graphs.
//!
//! Degrees are floored at a tiny constant before the log so an isolated
//! node yields a large-but-finite penalty instead of `-inf`; how many rows
//! hit the floor is reported back as a diagnostic.

use alloc::format;

use crate::numkit::{Mat, Tape, Var};
use crate::{Error, Result, EPS_FLOOR};

fn require_square_symmetric(a: &Mat) -> Result<usize> {
    let (n, m) = a.shape();
    if n == 0 || n != m {
        return Err(Error::contract(format!("adjacency must be square and nonempty, got {n}×{m}")));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if a[(i, j)] != a[(j, i)] {
                return Err(Error::contract(format!(
                    "adjacency is asymmetric at ({i}, {j}): {} vs {}",
                    a[(i, j)],
                    a[(j, i)]
                )));
            }
        }
    }
    Ok(n)
}

/// Dirichlet energy of `features` on the graph: `tr(Xᵀ(D − A)X) / n²`.
///
/// Differentiable in both arguments. Requires a square, symmetric
/// adjacency whose row count matches `features`; zero for an empty graph
/// and for features that are constant across nodes.
pub fn dirichlet_energy(tape: &mut Tape, adjacency: Var, features: Var) -> Result<Var> {
    let n = require_square_symmetric(tape.value(adjacency))?;
    let (fn_, _) = tape.value(features).shape();
    if fn_ != n {
        return Err(Error::contract(format!(
            "feature rows ({fn_}) must match adjacency size ({n})"
        )));
    }
    let sq = tape.hadamard(features, features);
    let sq_norms = tape.row_sum(sq);
    let degrees = tape.row_sum(adjacency);
    let weighted = tape.dot(degrees, sq_norms);
    let ax = tape.matmul(adjacency, features);
    let cross = tape.dot(ax, features);
    let inv = 1.0 / (n as f64 * n as f64);
    Ok(tape.add_scaled(weighted, cross, inv, -inv))
}

/// [`dirichlet_energy`] with the feature side precomputed.
///
/// `feature_gram` must be the constant `X·Xᵀ` (n×n) and `sq_norms` its
/// diagonal as an n×1 column. When the same features are scored against
/// many adjacencies this turns each evaluation into two `n²` dot products
/// instead of a fresh matrix product. Gradients flow to the adjacency
/// only, so the precomputed parts should be recorded as constants.
pub fn dirichlet_energy_with_gram(
    tape: &mut Tape,
    adjacency: Var,
    feature_gram: Var,
    sq_norms: Var,
) -> Result<Var> {
    let n = require_square_symmetric(tape.value(adjacency))?;
    if tape.value(feature_gram).shape() != (n, n) {
        return Err(Error::contract(format!(
            "feature gram must be {n}×{n}, got {:?}",
            tape.value(feature_gram).shape()
        )));
    }
    if tape.value(sq_norms).shape() != (n, 1) {
        return Err(Error::contract(format!(
            "squared norms must be {n}×1, got {:?}",
            tape.value(sq_norms).shape()
        )));
    }
    let degrees = tape.row_sum(adjacency);
    let weighted = tape.dot(degrees, sq_norms);
    let cross = tape.dot(adjacency, feature_gram);
    let inv = 1.0 / (n as f64 * n as f64);
    Ok(tape.add_scaled(weighted, cross, inv, -inv))
}

/// Connectivity log barrier plus Frobenius sparsity penalty:
/// `−(β/n)·1ᵀlog(A·1) + (γ/n²)·‖A‖²_F`.
///
/// Degrees are floored at `1e-12` inside the log; the returned count says
/// how many rows hit that floor (isolated or near-isolated nodes). Terms
/// with a zero coefficient are skipped entirely — the zero-degree floor
/// can then never fire, and no gradient is recorded for that term.
pub fn connectivity_sparsity(
    tape: &mut Tape,
    adjacency: Var,
    beta: f64,
    gamma: f64,
) -> Result<(Var, usize)> {
    if beta < 0.0 || gamma < 0.0 || !beta.is_finite() || !gamma.is_finite() {
        return Err(Error::config(format!(
            "connectivity/sparsity coefficients must be finite and >= 0, got β={beta}, γ={gamma}"
        )));
    }
    let n = require_square_symmetric(tape.value(adjacency))? as f64;
    let barrier = if beta > 0.0 {
        let degrees = tape.row_sum(adjacency);
        let (logs, floored) = tape.log_floor(degrees, EPS_FLOOR);
        Some((tape.sum(logs), floored))
    } else {
        None
    };
    let frob = if gamma > 0.0 { Some(tape.dot(adjacency, adjacency)) } else { None };
    let cb = -beta / n;
    let cg = gamma / (n * n);
    Ok(match (barrier, frob) {
        (Some((b, fl)), Some(f)) => (tape.add_scaled(b, f, cb, cg), fl),
        (Some((b, fl)), None) => (tape.add_scaled(b, b, cb, 0.0), fl),
        (None, Some(f)) => (tape.add_scaled(f, f, cg, 0.0), 0),
        (None, None) => (tape.constant(Mat::scalar(0.0)), 0),
    })
}

/// Full graph regularizer: `α·dirichlet + connectivity/sparsity`.
///
/// Returns the scalar loss and the floored-degree count from the barrier.
/// Each term with a zero coefficient is skipped, so e.g. `α = β = γ = 0`
/// costs nothing and contributes no gradient.
pub fn graph_reg_loss(
    tape: &mut Tape,
    adjacency: Var,
    features: Var,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Result<(Var, usize)> {
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::config(format!("smoothness coefficient must be >= 0, got α={alpha}")));
    }
    let (rest, floored) = connectivity_sparsity(tape, adjacency, beta, gamma)?;
    if alpha == 0.0 {
        return Ok((rest, floored));
    }
    let omega = dirichlet_energy(tape, adjacency, features)?;
    Ok((tape.add_scaled(omega, rest, alpha, 1.0), floored))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{grad_check, GradCheckConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval_dirichlet(a: &Mat, x: &Mat) -> f64 {
        let mut t = Tape::new();
        let av = t.constant(a.clone());
        let xv = t.constant(x.clone());
        let d = dirichlet_energy(&mut t, av, xv).unwrap();
        t.value(d).scalar_value()
    }

    /// Literal half-sum over all pairs: (1/2n²)·Σ A_ij·‖x_i − x_j‖².
    fn dirichlet_double_loop(a: &Mat, x: &Mat) -> f64 {
        let n = a.rows();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let dist: f64 =
                    (0..x.cols()).map(|c| (x[(i, c)] - x[(j, c)]).powi(2)).sum();
                total += a[(i, j)] * dist;
            }
        }
        total / (2.0 * n as f64 * n as f64)
    }

    fn random_symmetric(n: usize, rng: &mut impl Rng) -> Mat {
        let mut a = Mat::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = if rng.random::<f64>() < 0.4 { 0.0 } else { rng.random::<f64>() };
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        a
    }

    #[test]
    fn two_node_energy_oracle() {
        // Single edge between x₀ = 0 and x₁ = 2: (1/(2·4))·(4 + 4) = 1.
        let a = Mat::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let x = Mat::from_vec(2, 1, vec![0.0, 2.0]);
        assert!((eval_dirichlet(&a, &x) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_graph_and_constant_features_have_zero_energy() {
        let x = Mat::from_fn(4, 3, |i, j| (i * 3 + j) as f64);
        assert_eq!(eval_dirichlet(&Mat::zeros(4, 4), &x), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_symmetric(4, &mut rng);
        let constant = Mat::filled(4, 3, 2.5);
        assert!(eval_dirichlet(&a, &constant).abs() < 1e-12);
    }

    #[test]
    fn trace_form_matches_double_loop_on_100_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for case in 0..100 {
            let n = rng.random_range(2..25);
            let d = rng.random_range(1..6);
            let a = random_symmetric(n, &mut rng);
            let x = Mat::from_fn(n, d, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            let fast = eval_dirichlet(&a, &x);
            let slow = dirichlet_double_loop(&a, &x);
            let rel = (fast - slow).abs() / slow.abs().max(1.0);
            assert!(rel <= 1e-10, "case {case}: {fast} vs {slow} (rel {rel})");
        }
    }

    #[test]
    fn precomputed_gram_form_matches_the_generic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.random_range(2..15);
            let d = rng.random_range(1..5);
            let a = random_symmetric(n, &mut rng);
            let x = Mat::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let generic = eval_dirichlet(&a, &x);

            let mut t = Tape::new();
            let av = t.leaf(a.clone());
            let gram = t.constant(x.gram(1.0));
            let sq = t.constant(Mat::from_fn(n, 1, |i, _| {
                x.row(i).iter().map(|v| v * v).sum()
            }));
            let d_var = dirichlet_energy_with_gram(&mut t, av, gram, sq).unwrap();
            let fast = t.value(d_var).scalar_value();
            assert!((generic - fast).abs() <= 1e-10 * generic.abs().max(1.0));

            // Both forms must agree on the adjacency gradient too.
            let mut g = t.backward(d_var).unwrap();
            let ga_fast = g.take(av).unwrap();
            let mut t2 = Tape::new();
            let av2 = t2.leaf(a.clone());
            let xv2 = t2.constant(x.clone());
            let d2 = dirichlet_energy(&mut t2, av2, xv2).unwrap();
            let mut g2 = t2.backward(d2).unwrap();
            let ga_generic = g2.take(av2).unwrap();
            for (p, q) in ga_fast.iter().zip(ga_generic.iter()) {
                assert!((p - q).abs() <= 1e-10 * p.abs().max(1.0), "{p} vs {q}");
            }
        }
    }

    #[test]
    fn rejects_asymmetric_or_mismatched_inputs() {
        let mut t = Tape::new();
        let asym = t.constant(Mat::from_vec(2, 2, vec![0.0, 1.0, 0.5, 0.0]));
        let x = t.constant(Mat::zeros(2, 1));
        assert!(dirichlet_energy(&mut t, asym, x).is_err());

        let ok = t.constant(Mat::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]));
        let wrong_rows = t.constant(Mat::zeros(3, 1));
        assert!(dirichlet_energy(&mut t, ok, wrong_rows).is_err());
        assert!(connectivity_sparsity(&mut t, asym, 0.1, 0.1).is_err());
    }

    #[test]
    fn identity_adjacency_barrier_and_frobenius_oracle() {
        // A = I (n = 2): degrees are 1, so the barrier vanishes and only
        // the Frobenius term remains: γ/n²·n = γ/n.
        let mut t = Tape::new();
        let a = t.constant(Mat::eye(2));
        let (f, floored) = connectivity_sparsity(&mut t, a, 1.0, 0.5).unwrap();
        assert_eq!(floored, 0);
        assert!((t.value(f).scalar_value() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_adjacency_floors_every_degree() {
        let n = 3;
        let mut t = Tape::new();
        let a = t.constant(Mat::zeros(n, n));
        let beta = 0.7;
        let (f, floored) = connectivity_sparsity(&mut t, a, beta, 0.0).unwrap();
        assert_eq!(floored, n);
        // −(β/n)·n·ln(1e-12) = −β·ln(1e-12), large and positive.
        let want = -beta * EPS_FLOOR.ln();
        assert!((t.value(f).scalar_value() - want).abs() < 1e-12 * want);
    }

    #[test]
    fn zero_coefficients_skip_terms_entirely() {
        let mut t = Tape::new();
        // Zero graph would blow up the barrier; with β = 0 it must not run.
        let a = t.leaf(Mat::zeros(3, 3));
        let (f, floored) = connectivity_sparsity(&mut t, a, 0.0, 0.0).unwrap();
        assert_eq!(floored, 0);
        assert_eq!(t.value(f).scalar_value(), 0.0);
        // And nothing differentiable was recorded for it.
        let x = t.constant(Mat::zeros(3, 2));
        let (loss, _) = graph_reg_loss(&mut t, a, x, 0.0, 0.0, 0.0).unwrap();
        let mut g = t.backward(loss).unwrap();
        assert!(g.take(a).is_none(), "zero-coefficient loss must not touch the adjacency");
    }

    #[test]
    fn barrier_strictly_decreases_when_any_degree_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let n = rng.random_range(2..8);
            let mut a = random_symmetric(n, &mut rng);
            // Keep all degrees safely above the floor.
            for i in 0..n {
                let j = (i + 1) % n;
                if a[(i, j)] < 0.1 {
                    a[(i, j)] = 0.5;
                    a[(j, i)] = 0.5;
                }
            }
            let eval = |a: &Mat| {
                let mut t = Tape::new();
                let av = t.constant(a.clone());
                let (f, _) = connectivity_sparsity(&mut t, av, 1.0, 0.0).unwrap();
                t.value(f).scalar_value()
            };
            let before = eval(&a);
            let i = rng.random_range(0..n);
            let j = (i + rng.random_range(1..n)) % n;
            a[(i, j)] += 0.3;
            a[(j, i)] = a[(i, j)];
            let after = eval(&a);
            assert!(after < before, "barrier must drop: {before} -> {after}");
        }
    }

    #[test]
    fn rejects_negative_coefficients() {
        let mut t = Tape::new();
        let a = t.constant(Mat::eye(2));
        let x = t.constant(Mat::zeros(2, 1));
        assert!(connectivity_sparsity(&mut t, a, -0.1, 0.0).is_err());
        assert!(connectivity_sparsity(&mut t, a, 0.0, -0.1).is_err());
        assert!(graph_reg_loss(&mut t, a, x, -1.0, 0.0, 0.0).is_err());
    }

    fn fd_check(
        build: impl Fn(&mut Tape, Var) -> Var,
        x0: &Mat,
        what: &str,
    ) {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x0.clone());
        let loss = build(&mut tape, leaf);
        let mut grads = tape.backward(loss).unwrap();
        let analytic = grads.take(leaf).unwrap();
        let mut f = |m: &Mat| {
            let mut t = Tape::new();
            let v = t.constant(m.clone());
            let l = build(&mut t, v);
            t.value(l).scalar_value()
        };
        let report = grad_check(&mut f, x0, &analytic, &GradCheckConfig::default()).unwrap();
        assert_eq!(report.skipped_kinks, 0, "{what}: unexpected kinks");
        assert!(report.checked > 0);
        assert!(report.max_rel_err <= 1e-6, "{what}: rel err {}", report.max_rel_err);
    }

    /// Like [`fd_check`] but restricted to the symmetric subspace: the loss
    /// is probed through U ↦ (U + Uᵀ)/2 so coordinate bumps cannot violate
    /// the symmetry contract, and the analytic gradient is symmetrized to
    /// match that parametrization.
    fn fd_check_symmetric(
        build: impl Fn(&mut Tape, Var) -> Var,
        a0: &Mat,
        what: &str,
    ) {
        let mut tape = Tape::new();
        let leaf = tape.leaf(a0.clone());
        let loss = build(&mut tape, leaf);
        let mut grads = tape.backward(loss).unwrap();
        let g = grads.take(leaf).unwrap();
        let analytic =
            Mat::from_fn(a0.rows(), a0.cols(), |i, j| (g[(i, j)] + g[(j, i)]) / 2.0);
        let mut f = |u: &Mat| {
            let m = Mat::from_fn(u.rows(), u.cols(), |i, j| (u[(i, j)] + u[(j, i)]) / 2.0);
            let mut t = Tape::new();
            let v = t.constant(m);
            let l = build(&mut t, v);
            t.value(l).scalar_value()
        };
        let report = grad_check(&mut f, a0, &analytic, &GradCheckConfig::default()).unwrap();
        assert_eq!(report.skipped_kinks, 0, "{what}: unexpected kinks");
        assert!(report.checked > 0);
        assert!(
            report.max_rel_err <= 1e-6,
            "{what}: rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn gradients_verify_against_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 5;
        let mut a0 = random_symmetric(n, &mut rng);
        for i in 0..n {
            // Keep degrees far from the log floor so no kink is near.
            a0[(i, (i + 1) % n)] += 0.6;
            a0[((i + 1) % n, i)] = a0[(i, (i + 1) % n)];
        }
        let x0 = Mat::from_fn(n, 3, |_, _| rng.random::<f64>() * 2.0 - 1.0);

        let x_fixed = x0.clone();
        fd_check_symmetric(
            move |t, a| {
                let x = t.constant(x_fixed.clone());
                dirichlet_energy(t, a, x).unwrap()
            },
            &a0,
            "dirichlet w.r.t. adjacency",
        );

        let a_fixed = a0.clone();
        fd_check(
            move |t, x| {
                let a = t.constant(a_fixed.clone());
                dirichlet_energy(t, a, x).unwrap()
            },
            &x0,
            "dirichlet w.r.t. features",
        );

        fd_check_symmetric(
            |t, a| connectivity_sparsity(t, a, 0.4, 0.7).unwrap().0,
            &a0,
            "connectivity/sparsity w.r.t. adjacency",
        );

        let x_fixed = x0.clone();
        fd_check_symmetric(
            move |t, a| {
                let x = t.constant(x_fixed.clone());
                graph_reg_loss(t, a, x, 0.3, 0.2, 0.5).unwrap().0
            },
            &a0,
            "full regularizer w.r.t. adjacency",
        );
    }

    proptest! {
        #[test]
        fn dirichlet_energy_is_nonnegative(
            n in 2usize..10,
            d in 1usize..4,
            seed in 0u64..5000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_symmetric(n, &mut rng);
            let x = Mat::from_fn(n, d, |_, _| rng.random::<f64>() * 6.0 - 3.0);
            let e = eval_dirichlet(&a, &x);
            prop_assert!(e >= -1e-12, "energy {e} went negative");
        }
    }
}
