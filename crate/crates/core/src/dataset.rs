//! In-memory dataset container, split sampling, feature normalization, and
//! edge perturbation for robustness studies.
//!
//! A [`Dataset`] couples node features with integer class labels, optional
//! starting adjacency, and the three node masks (train/dev/test) used by
//! transductive training. Construction validates every invariant the rest
//! of the crate relies on; file parsing lives in the companion CLI crate.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numkit::Mat;
use crate::{Error, Result, EPS_FLOOR};

/// Node-classification dataset: features, labels, optional starting graph,
/// and the train/dev/test node masks.
///
/// Invariants enforced at construction and by [`Dataset::set_splits`]:
/// labels lie in `[0, classes)`, features are finite, the starting
/// adjacency (when present) is square, symmetric, binary, with a zero
/// diagonal, and the three masks are strictly increasing, in range, and
/// pairwise disjoint.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    /// Node features, one row per node.
    pub features: Mat,
    /// Class label per node, each in `[0, classes)`.
    pub labels: Rc<[u32]>,
    /// Number of classes (≥ 2).
    pub classes: usize,
    /// Starting adjacency, absent for tabular data (a kNN graph is built
    /// from features instead).
    pub initial_adjacency: Option<Mat>,
    /// Node masks; empty until splits are drawn or loaded.
    pub splits: SplitMasks,
}

/// The three disjoint node-index masks, each sorted strictly increasing.
#[derive(Clone, Debug, Default)]
pub struct SplitMasks {
    pub train: Rc<[u32]>,
    pub dev: Rc<[u32]>,
    pub test: Rc<[u32]>,
}

/// Requested sizes of the three splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

/// Result of [`make_splits`]: the masks plus any adjustments that had to be
/// made to honor the request (e.g. a test count capped by dataset size).
#[derive(Clone, Debug)]
pub struct SplitDraw {
    pub masks: SplitMasks,
    pub warnings: Vec<String>,
}

/// Direction of a [`perturb_edges`] run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbMode {
    /// Remove existing undirected edges.
    Delete,
    /// Insert new undirected edges between currently unconnected pairs.
    Add,
}

impl Dataset {
    /// Validates and assembles a dataset with empty splits.
    pub fn new(
        name: &str,
        features: Mat,
        labels: Rc<[u32]>,
        classes: usize,
        initial_adjacency: Option<Mat>,
    ) -> Result<Self> {
        let (n, d) = features.shape();
        if n == 0 {
            return Err(Error::contract("empty dataset: no nodes"));
        }
        if d == 0 {
            return Err(Error::contract("empty dataset: nodes have no features"));
        }
        if !features.all_finite() {
            return Err(Error::numerical(format!(
                "dataset {name}: features contain NaN or Inf"
            )));
        }
        if labels.len() != n {
            return Err(Error::contract(format!(
                "dataset {name}: {} labels for {n} nodes",
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::contract(format!(
                "dataset {name}: need at least 2 classes, got {classes}"
            )));
        }
        for (i, &y) in labels.iter().enumerate() {
            if y as usize >= classes {
                return Err(Error::contract(format!(
                    "dataset {name}: label {y} at node {i} outside [0, {classes})"
                )));
            }
        }
        if let Some(a0) = &initial_adjacency {
            let an = validate_binary_adjacency(a0)?;
            if an != n {
                return Err(Error::contract(format!(
                    "dataset {name}: adjacency is {an}×{an} but there are {n} nodes"
                )));
            }
        }
        Ok(Dataset {
            name: String::from(name),
            features,
            labels,
            classes,
            initial_adjacency,
            splits: SplitMasks::default(),
        })
    }

    pub fn nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Installs masks after checking they are strictly increasing, in
    /// range, and pairwise disjoint.
    pub fn set_splits(&mut self, masks: SplitMasks) -> Result<()> {
        let n = self.nodes();
        let mut owner: Vec<u8> = vec![0; n];
        for (tag, name, mask) in [
            (1u8, "train", &masks.train),
            (2, "dev", &masks.dev),
            (3, "test", &masks.test),
        ] {
            let mut prev: Option<u32> = None;
            for &i in mask.iter() {
                if i as usize >= n {
                    return Err(Error::contract(format!(
                        "{name} mask: node {i} outside [0, {n})"
                    )));
                }
                if let Some(p) = prev {
                    if i <= p {
                        return Err(Error::contract(format!(
                            "{name} mask: indices not strictly increasing at {p} → {i}"
                        )));
                    }
                }
                let o = &mut owner[i as usize];
                if *o != 0 {
                    let other = ["train", "dev", "test"][*o as usize - 1];
                    return Err(Error::contract(format!(
                        "node {i} appears in both the {other} and {name} masks"
                    )));
                }
                *o = tag;
                prev = Some(i);
            }
        }
        self.splits = masks;
        Ok(())
    }
}

/// Checks that a starting adjacency is square, finite, symmetric, binary,
/// and has no self-loops; returns its size.
pub fn validate_binary_adjacency(a0: &Mat) -> Result<usize> {
    let (n, m) = a0.shape();
    if n == 0 || n != m {
        return Err(Error::contract(format!(
            "adjacency must be square and nonempty, got {n}×{m}"
        )));
    }
    if !a0.all_finite() {
        return Err(Error::numerical("adjacency contains NaN or Inf"));
    }
    for i in 0..n {
        if a0[(i, i)] != 0.0 {
            return Err(Error::contract(format!(
                "adjacency has a self-loop at node {i} (weight {})",
                a0[(i, i)]
            )));
        }
        for j in (i + 1)..n {
            let v = a0[(i, j)];
            if v != a0[(j, i)] {
                return Err(Error::contract(format!(
                    "adjacency is asymmetric at ({i}, {j}): {v} vs {}",
                    a0[(j, i)]
                )));
            }
            if v != 0.0 && v != 1.0 {
                return Err(Error::contract(format!(
                    "adjacency must be binary, found {v} at ({i}, {j})"
                )));
            }
        }
    }
    Ok(n)
}

/// Draws train/dev/test masks for a dataset: the train split is
/// class-balanced where the labels allow it, dev and test are uniform
/// draws from the remainder. Deterministic per seed.
///
/// If the three counts together exceed the node count, the test split is
/// capped at whatever remains after train and dev, and a warning records
/// the adjustment. Train plus dev exceeding the node count is an error.
pub fn make_splits(dataset: &Dataset, counts: SplitCounts, seed: u64) -> Result<SplitDraw> {
    let n = dataset.nodes();
    let SplitCounts { train, dev, test } = counts;
    if train == 0 {
        return Err(Error::config("split counts: the train split cannot be empty"));
    }
    if train + dev > n {
        return Err(Error::config(format!(
            "split counts: train {train} + dev {dev} exceed the {n} available nodes"
        )));
    }
    let mut warnings = Vec::new();
    let test = if train + dev + test > n {
        let capped = n - train - dev;
        warnings.push(format!(
            "test split capped at {capped} of the {test} requested: \
             only {n} nodes after train {train} + dev {dev}"
        ));
        capped
    } else {
        test
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<u32> = (0..n as u32).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }

    // Per-class candidate pools, each in permutation (i.e. random) order.
    let c = dataset.classes;
    let mut pools: Vec<Vec<u32>> = vec![Vec::new(); c];
    for &i in &perm {
        pools[dataset.labels[i as usize] as usize].push(i);
    }

    // Balanced quotas, clipped to availability; shortfall is passed
    // round-robin to classes that still have candidates.
    let mut take: Vec<usize> = (0..c).map(|k| train / c + usize::from(k < train % c)).collect();
    let mut deficit = 0usize;
    for k in 0..c {
        if take[k] > pools[k].len() {
            deficit += take[k] - pools[k].len();
            take[k] = pools[k].len();
        }
    }
    while deficit > 0 {
        let before = deficit;
        for k in 0..c {
            if deficit > 0 && take[k] < pools[k].len() {
                take[k] += 1;
                deficit -= 1;
            }
        }
        if deficit == before {
            // Unreachable while train ≤ n, kept as a guard against a
            // miscounted pool rather than an infinite loop.
            return Err(Error::contract(format!(
                "split sampling could not place {deficit} train nodes"
            )));
        }
    }

    let mut in_train = vec![false; n];
    let mut train_idx: Vec<u32> = Vec::with_capacity(train);
    for k in 0..c {
        for &i in pools[k].iter().take(take[k]) {
            train_idx.push(i);
            in_train[i as usize] = true;
        }
    }

    let mut dev_idx: Vec<u32> = Vec::with_capacity(dev);
    let mut test_idx: Vec<u32> = Vec::with_capacity(test);
    for &i in &perm {
        if in_train[i as usize] {
            continue;
        }
        if dev_idx.len() < dev {
            dev_idx.push(i);
        } else if test_idx.len() < test {
            test_idx.push(i);
        } else {
            break;
        }
    }

    train_idx.sort_unstable();
    dev_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(SplitDraw {
        masks: SplitMasks {
            train: train_idx.into(),
            dev: dev_idx.into(),
            test: test_idx.into(),
        },
        warnings,
    })
}

/// Randomly deletes or adds `round(ratio · |E|)` undirected edges, where
/// `|E|` counts each undirected edge once. Deletion picks uniformly among
/// existing edges, addition uniformly among unconnected non-self pairs
/// (erroring if there are not enough of them). The result stays symmetric
/// and binary. Deterministic per seed.
pub fn perturb_edges(a0: &Mat, ratio: f64, mode: PerturbMode, seed: u64) -> Result<Mat> {
    let n = validate_binary_adjacency(a0)?;
    if !ratio.is_finite() || !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config(format!("perturbation ratio {ratio} outside [0, 1]")));
    }

    let mut edges: Vec<(u32, u32)> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if a0[(i, j)] == 1.0 {
                edges.push((i as u32, j as u32));
            }
        }
    }
    let e = edges.len();
    let k = crate::numkit::round(ratio * e as f64) as usize;
    let mut out = a0.clone();
    if k == 0 {
        return Ok(out);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        PerturbMode::Delete => {
            for i in 0..k {
                let j = rng.random_range(i..e);
                edges.swap(i, j);
                let (a, b) = edges[i];
                out[(a as usize, b as usize)] = 0.0;
                out[(b as usize, a as usize)] = 0.0;
            }
        }
        PerturbMode::Add => {
            let absent = n * (n - 1) / 2 - e;
            if k > absent {
                return Err(Error::config(format!(
                    "cannot add {k} edges: only {absent} node pairs are unconnected"
                )));
            }
            let mut gaps: Vec<(u32, u32)> = Vec::with_capacity(absent);
            for i in 0..n {
                for j in (i + 1)..n {
                    if a0[(i, j)] == 0.0 {
                        gaps.push((i as u32, j as u32));
                    }
                }
            }
            for i in 0..k {
                let j = rng.random_range(i..absent);
                gaps.swap(i, j);
                let (a, b) = gaps[i];
                out[(a as usize, b as usize)] = 1.0;
                out[(b as usize, a as usize)] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Rescales every column to zero mean and unit variance over the whole
/// matrix (population variance). Columns with (numerically) zero variance
/// come out as all zeros rather than dividing by noise.
pub fn standardize_columns(x: &Mat) -> Mat {
    let (n, d) = x.shape();
    let mut out = Mat::zeros(n, d);
    if n == 0 {
        return out;
    }
    for j in 0..d {
        let mut mean = 0.0;
        for i in 0..n {
            mean += x[(i, j)];
        }
        mean /= n as f64;
        let mut var = 0.0;
        for i in 0..n {
            let c = x[(i, j)] - mean;
            var += c * c;
        }
        let std = crate::numkit::sqrt(var / n as f64);
        if std > EPS_FLOOR {
            for i in 0..n {
                out[(i, j)] = (x[(i, j)] - mean) / std;
            }
        }
    }
    out
}

/// Rescales every row to unit L1 norm (sum of absolute values); rows that
/// are (numerically) all zero stay zero.
pub fn row_normalize_l1(x: &Mat) -> Mat {
    let (n, d) = x.shape();
    let mut out = Mat::zeros(n, d);
    for i in 0..n {
        let src = x.row(i);
        let mut s = 0.0;
        for &v in src {
            s += if v < 0.0 { -v } else { v };
        }
        if s > EPS_FLOOR {
            let dst = out.row_mut(i);
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = v / s;
            }
        }
    }
    out
}
