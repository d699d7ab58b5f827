//! Graph construction from node features.
//!
//! Two builders live here. The learned one is a multi-head weighted cosine:
//! each head owns a per-dimension weight vector, reweights every node vector
//! with it, and scores pairs by the cosine of the reweighted vectors; heads
//! are averaged and the result is sparsified by dropping entries at or below
//! a threshold. It runs on the tape, so both the head weights and the node
//! vectors receive gradients. The other builder is a plain cosine kNN graph
//! used as the fixed starting topology when a dataset ships without one.

use alloc::vec::Vec;

use rand::Rng;

use crate::numkit::{Mat, Tape, Var};
use crate::{Error, Result, NORM_FLOOR};

/// Learned parameters of the multi-head weighted cosine metric.
#[derive(Clone, Debug)]
pub struct MetricParams {
    /// Per-head feature weights, one row per head (`heads × dim`).
    pub weights: Mat,
    /// Sparsification threshold in `[0, 1)`; similarities `<= epsilon` drop.
    pub epsilon: f64,
}

impl MetricParams {
    /// Fresh parameters: the first head starts as all-ones, so its first
    /// similarity pass is exactly the plain cosine; any further heads jitter
    /// uniformly within ±0.1 of one to break the symmetry between heads
    /// (identical heads would receive identical gradients forever).
    ///
    /// Starting at the unweighted cosine gives every run the same sane
    /// initial topology; training reshapes the weights from there.
    pub fn init<R: Rng + ?Sized>(
        heads: usize,
        dim: usize,
        epsilon: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim == 0 {
            return Err(Error::config(alloc::format!(
                "metric init: heads ({heads}) and dim ({dim}) must be positive"
            )));
        }
        check_epsilon(epsilon)?;
        let weights = Mat::from_fn(heads, dim, |h, _| {
            if h == 0 {
                1.0
            } else {
                1.0 + (rng.random::<f64>() - 0.5) * 0.2
            }
        });
        Ok(MetricParams { weights, epsilon })
    }

    pub fn heads(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::config(alloc::format!(
            "sparsification threshold {epsilon} outside [0, 1)"
        )));
    }
    Ok(())
}

/// Head-averaged weighted cosine similarity of every node pair.
///
/// `weights` is `heads × dim`, `nodes` is `n × dim`; the result is the
/// `n × n` matrix whose `(i, j)` entry averages, over heads, the cosine of
/// the two node vectors after entrywise reweighting by that head. Rows whose
/// reweighted norm falls below an internal floor are treated as zero
/// directions: they score 0 against everything, themselves included. The
/// output is exactly symmetric, entries lie in `[-1, 1]`, and the diagonal
/// is 1 for every node with a nonzero reweighted vector.
///
/// Errors when the weight and node dimensions disagree or either input is
/// empty.
pub fn multi_head_cosine(tape: &mut Tape, weights: Var, nodes: Var) -> Result<Var> {
    let (m, d) = tape.value(weights).shape();
    let (n, dn) = tape.value(nodes).shape();
    if m == 0 || d == 0 || n == 0 {
        return Err(Error::contract(alloc::format!(
            "multi_head_cosine: degenerate shapes (weights {m}×{d}, nodes {n}×{dn})"
        )));
    }
    if d != dn {
        return Err(Error::contract(alloc::format!(
            "multi_head_cosine: weights have dim {d} but nodes have dim {dn}"
        )));
    }
    Ok(tape.multi_head_cos(nodes, weights, NORM_FLOOR))
}

/// Drops similarities at or below `epsilon`, keeping surviving values as-is.
///
/// Gradient-wise this is an identity on the surviving support and zero
/// elsewhere. `epsilon` must lie in `[0, 1)`.
pub fn epsilon_sparsify(tape: &mut Tape, similarities: Var, epsilon: f64) -> Result<Var> {
    check_epsilon(epsilon)?;
    Ok(tape.threshold(similarities, epsilon))
}

/// A kNN graph built by [`knn_graph`].
#[derive(Clone, Debug)]
pub struct KnnGraph {
    /// Symmetric binary adjacency with zero diagonal.
    pub adjacency: Mat,
    /// Neighbour count actually used; smaller than requested when the
    /// request was `>= n` and had to be clamped to `n - 1`.
    pub effective_k: usize,
}

/// Builds an undirected kNN graph under plain cosine similarity.
///
/// Each node picks its `k` most similar other nodes (self excluded, ties
/// broken toward the lowest node index), and the directed selections are
/// symmetrized by union into a binary adjacency. A request of `k >= n` is
/// clamped to `n - 1`; the caller can detect that through `effective_k`.
/// Nodes whose feature norm falls below the internal floor score 0 against
/// everything and end up ranked by index order alone.
///
/// Errors on an empty feature matrix or non-finite features.
pub fn knn_graph(features: &Mat, k: usize) -> Result<KnnGraph> {
    let (n, d) = features.shape();
    if n == 0 || d == 0 {
        return Err(Error::contract(alloc::format!(
            "knn_graph: empty feature matrix ({n}×{d})"
        )));
    }
    if !features.all_finite() {
        return Err(Error::numerical("knn_graph: features contain NaN or Inf"));
    }
    let effective_k = k.min(n - 1);

    // Unit-normalize rows once so the similarity matrix is a single Gram
    // product; floored rows become zero vectors, scoring 0 everywhere.
    let mut unit = features.clone();
    for i in 0..n {
        let row = unit.row_mut(i);
        let norm = crate::numkit::sqrt(row.iter().map(|v| v * v).sum::<f64>());
        let inv = if norm > NORM_FLOOR { 1.0 / norm } else { 0.0 };
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    let sims = unit.gram(1.0);

    let mut adjacency = Mat::zeros(n, n);
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        let row = sims.row(i);
        // Descending similarity, ties toward the lower index. The index
        // tiebreak also makes the sort total despite f64 comparisons.
        order.sort_unstable_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).expect("finite similarities").then(a.cmp(&b))
        });
        for &j in order.iter().take(effective_k) {
            adjacency[(i, j)] = 1.0;
            adjacency[(j, i)] = 1.0;
        }
    }
    Ok(KnnGraph { adjacency, effective_k })
}
