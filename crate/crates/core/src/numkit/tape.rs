//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] is a define-by-run arena: each operation executes eagerly and
//! appends a node recording its inputs, output, and whatever the backward
//! rule needs. [`Tape::backward`] walks the arena once in reverse and returns
//! the gradients of every leaf that requires them. One recording supports
//! exactly one backward pass; [`Tape::reset`] recycles the arena's buffers
//! into an internal pool so the next recording (the next training epoch,
//! typically) allocates almost nothing.
//!
//! The op set is exactly what the model needs, including two deliberately
//! fused ops: [`Tape::multi_head_cos`] (weighted-cosine similarity averaged
//! over heads — fusing keeps per-head `n×n` score matrices off the arena) and
//! [`Tape::softmax_ce`] (softmax + masked cross-entropy, which also exposes
//! the class probabilities for free). Kinked ops (`relu`, `threshold`,
//! floored norms and logs) take the zero subgradient at their kinks.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::vec::Vec;
use alloc::{format, vec};

use super::mat::{self, Mat};
use crate::{Error, Result};

/// Handle to a tape node. Carries the recording generation so a stale handle
/// (from before a [`Tape::reset`]) is caught instead of silently aliasing.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var {
    idx: u32,
    gen: u32,
}

enum Op {
    Leaf,
    /// `a · b`
    MatMul { a: Var, b: Var },
    /// `ca·a + cb·b`, same shapes
    AddScaled { a: Var, b: Var, ca: f64, cb: f64 },
    /// `ca·a + cb·b + cc·c`, same shapes
    AddScaled3 { a: Var, b: Var, c: Var, ca: f64, cb: f64, cc: f64 },
    /// `a ⊙ b`
    Hadamard { a: Var, b: Var },
    /// `max(a, 0)`, subgradient 0 at the kink
    Relu { a: Var },
    /// `a ⊙ [a > ε]`, gradient flows only through retained entries
    Threshold { a: Var },
    /// `ln(max(a, floor))`, zero gradient below the floor
    LogFloor { a: Var, floor: f64 },
    /// row sums: `n×m → n×1`
    RowSum { a: Var },
    /// sum of all entries: `→ 1×1`
    Sum { a: Var },
    /// `Σ a ⊙ b → 1×1` (Frobenius inner product)
    Dot { a: Var, b: Var },
    /// rows divided by their sums; rows with sum ≤ floor pass through
    RowNormalize { a: Var, floor: f64, sums: Box<[f64]> },
    /// inverted dropout; mask entries are `0` or `1/keep`
    Dropout { a: Var, mask: Box<[f64]> },
    /// mean weighted-cosine similarity over heads; see [`Tape::multi_head_cos`]
    MultiHeadCos { v: Var, w: Var, ucat: Mat, norms: Mat, floor: f64 },
    /// masked mean cross-entropy over softmaxed logit rows
    SoftmaxCe { logits: Var, probs: Rc<Mat>, targets: Rc<[u32]>, mask: Rc<[u32]> },
}

struct Node {
    value: Rc<Mat>,
    op: Op,
    needs_grad: bool,
}

/// Size-keyed free list of `Vec<f64>` buffers. Returned buffers keep their
/// stale contents; takers must fully overwrite (or ask for zeroed).
#[derive(Default)]
struct Pool {
    free: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl Pool {
    fn take_uninit(&mut self, len: usize) -> Vec<f64> {
        if let Some(list) = self.free.get_mut(&len) {
            if let Some(buf) = list.pop() {
                return buf;
            }
        }
        vec![0.0; len]
    }

    fn take_zeroed(&mut self, len: usize) -> Vec<f64> {
        let mut buf = self.take_uninit(len);
        buf.fill(0.0);
        buf
    }

    fn give(&mut self, buf: Vec<f64>) {
        if buf.is_empty() {
            return;
        }
        self.free.entry(buf.len()).or_default().push(buf);
    }
}

/// Leaf gradients produced by [`Tape::backward`]. Leaves that did not
/// participate in the loss (or were recorded without `requires_grad`) have no
/// entry — their gradient is identically zero.
pub struct Gradients {
    by_idx: BTreeMap<u32, Mat>,
    gen: u32,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        assert_eq!(v.gen, self.gen, "Var from a different tape generation");
        self.by_idx.get(&v.idx)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        assert_eq!(v.gen, self.gen, "Var from a different tape generation");
        self.by_idx.remove(&v.idx)
    }
}

/// Define-by-run reverse-mode tape. See the module docs.
pub struct Tape {
    nodes: Vec<Node>,
    gen: u32,
    spent: bool,
    pool: Pool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), gen: 0, spent: false, pool: Pool::default() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears the recording and recycles its buffers. Outstanding [`Var`]s
    /// and [`Gradients`] from the old recording become invalid (checked).
    pub fn reset(&mut self) {
        for node in self.nodes.drain(..) {
            if let Ok(m) = Rc::try_unwrap(node.value) {
                self.pool.give(m.into_vec());
            }
            if let Op::MultiHeadCos { ucat, norms, .. } = node.op {
                self.pool.give(ucat.into_vec());
                self.pool.give(norms.into_vec());
            }
        }
        self.gen = self.gen.wrapping_add(1);
        self.spent = false;
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[self.check(v)].value
    }

    /// Shared handle to a node's value (survives [`Tape::reset`]).
    pub fn rc_value(&self, v: Var) -> Rc<Mat> {
        Rc::clone(&self.nodes[self.check(v)].value)
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.gen, self.gen, "Var from a different tape generation");
        v.idx as usize
    }

    fn alloc(&mut self, rows: usize, cols: usize) -> Mat {
        Mat::from_buffer(rows, cols, self.pool.take_uninit(rows * cols))
    }

    fn push(&mut self, value: Rc<Mat>, op: Op, needs_grad: bool) -> Var {
        assert!(!self.spent, "recording on a spent tape; call reset() after backward()");
        assert!(self.nodes.len() < u32::MAX as usize);
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { value, op, needs_grad });
        Var { idx, gen: self.gen }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[self.check(v)].needs_grad
    }

    // -- recording ---------------------------------------------------------

    /// Trainable leaf: its gradient is produced by [`Tape::backward`].
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(Rc::new(value), Op::Leaf, true)
    }

    /// Non-trainable input, stored without copying.
    pub fn constant_rc(&mut self, value: Rc<Mat>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Rc::new(value), Op::Leaf, false)
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (am, ak) = self.value(a).shape();
        let (bk, bn) = self.value(b).shape();
        assert_eq!(ak, bk, "matmul: {am}x{ak} · {bk}x{bn}");
        let mut out = self.alloc(am, bn);
        mat::gemm_nn(
            out.as_mut_slice(),
            false,
            self.value(a).as_slice(),
            am,
            ak,
            self.value(b).as_slice(),
            bn,
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(Rc::new(out), Op::MatMul { a, b }, needs)
    }

    /// `ca·a + cb·b` (same shapes).
    pub fn add_scaled(&mut self, a: Var, b: Var, ca: f64, cb: f64) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add_scaled shape mismatch");
        let (r, c) = self.value(a).shape();
        let mut out = self.alloc(r, c);
        {
            let (av, bv) = (self.value(a).as_slice(), self.value(b).as_slice());
            for ((o, x), y) in out.as_mut_slice().iter_mut().zip(av).zip(bv) {
                *o = ca * x + cb * y;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Rc::new(out), Op::AddScaled { a, b, ca, cb }, needs)
    }

    /// `ca·a + cb·b + cc·c` (same shapes); one pass instead of two chained
    /// [`Tape::add_scaled`]s.
    pub fn add_scaled3(&mut self, a: Var, b: Var, c: Var, ca: f64, cb: f64, cc: f64) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add_scaled3 shape mismatch");
        assert_eq!(self.value(a).shape(), self.value(c).shape(), "add_scaled3 shape mismatch");
        let (r, cl) = self.value(a).shape();
        let mut out = self.alloc(r, cl);
        {
            let av = self.value(a).as_slice();
            let bv = self.value(b).as_slice();
            let cv = self.value(c).as_slice();
            let ov = out.as_mut_slice();
            for i in 0..ov.len() {
                ov[i] = ca * av[i] + cb * bv[i] + cc * cv[i];
            }
        }
        let needs = self.needs(a) || self.needs(b) || self.needs(c);
        self.push(Rc::new(out), Op::AddScaled3 { a, b, c, ca, cb, cc }, needs)
    }

    /// `a ⊙ b`.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "hadamard shape mismatch");
        let (r, c) = self.value(a).shape();
        let mut out = self.alloc(r, c);
        {
            let (av, bv) = (self.value(a).as_slice(), self.value(b).as_slice());
            for ((o, x), y) in out.as_mut_slice().iter_mut().zip(av).zip(bv) {
                *o = x * y;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Rc::new(out), Op::Hadamard { a, b }, needs)
    }

    /// `max(a, 0)` elementwise.
    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).shape();
        let mut out = self.alloc(r, c);
        for (o, x) in out.as_mut_slice().iter_mut().zip(self.value(a).iter()) {
            *o = if *x > 0.0 { *x } else { 0.0 };
        }
        let needs = self.needs(a);
        self.push(Rc::new(out), Op::Relu { a }, needs)
    }

    /// `a ⊙ [a > eps]`: entries at or below `eps` become exact zeros and
    /// carry no gradient. Requires `eps ≥ 0` so that retained entries are
    /// exactly the nonzero ones.
    pub fn threshold(&mut self, a: Var, eps: f64) -> Var {
        assert!(eps >= 0.0, "threshold requires eps >= 0, got {eps}");
        let (r, c) = self.value(a).shape();
        let mut out = self.alloc(r, c);
        for (o, x) in out.as_mut_slice().iter_mut().zip(self.value(a).iter()) {
            *o = if *x > eps { *x } else { 0.0 };
        }
        let needs = self.needs(a);
        self.push(Rc::new(out), Op::Threshold { a }, needs)
    }

    /// `ln(max(a, floor))` elementwise. Returns the var and how many entries
    /// were floored (useful for degree diagnostics).
    pub fn log_floor(&mut self, a: Var, floor: f64) -> (Var, usize) {
        assert!(floor > 0.0, "log_floor requires floor > 0");
        let (r, c) = self.value(a).shape();
        let mut out = self.alloc(r, c);
        let mut floored = 0usize;
        for (o, x) in out.as_mut_slice().iter_mut().zip(self.value(a).iter()) {
            if *x > floor {
                *o = super::ln(*x);
            } else {
                *o = super::ln(floor);
                floored += 1;
            }
        }
        let needs = self.needs(a);
        (self.push(Rc::new(out), Op::LogFloor { a, floor }, needs), floored)
    }

    /// Row sums: `n×m → n×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (r, _c) = self.value(a).shape();
        let mut out = self.alloc(r, 1);
        for i in 0..r {
            out.as_mut_slice()[i] = self.value(a).row(i).iter().sum();
        }
        let needs = self.needs(a);
        self.push(Rc::new(out), Op::RowSum { a }, needs)
    }

    /// Sum of all entries: `→ 1×1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        let needs = self.needs(a);
        self.push(Rc::new(Mat::scalar(s)), Op::Sum { a }, needs)
    }

    /// Frobenius inner product `Σ a ⊙ b → 1×1`.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "dot shape mismatch");
        let s = mat::dot_slices(self.value(a).as_slice(), self.value(b).as_slice());
        let needs = self.needs(a) || self.needs(b);
        self.push(Rc::new(Mat::scalar(s)), Op::Dot { a, b }, needs)
    }

    /// Divides each row by its sum. Rows with sum ≤ `floor` pass through
    /// unchanged (an all-zero row stays zero) with identity gradient.
    pub fn row_normalize(&mut self, a: Var, floor: f64) -> Var {
        let (r, c) = self.value(a).shape();
        let mut out = self.alloc(r, c);
        let mut sums = Vec::with_capacity(r);
        for i in 0..r {
            let row = self.value(a).row(i);
            let s: f64 = row.iter().sum();
            sums.push(s);
            let orow = &mut out.as_mut_slice()[i * c..(i + 1) * c];
            if s > floor {
                let inv = 1.0 / s;
                for (o, x) in orow.iter_mut().zip(row) {
                    *o = x * inv;
                }
            } else {
                orow.copy_from_slice(row);
            }
        }
        let needs = self.needs(a);
        self.push(
            Rc::new(out),
            Op::RowNormalize { a, floor, sums: sums.into_boxed_slice() },
            needs,
        )
    }

    /// Inverted dropout with drop probability `rate ∈ [0, 1)`: kept entries
    /// are scaled by `1/(1−rate)` so expectations match evaluation mode.
    pub fn dropout<R: rand::Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1), got {rate}");
        let (r, c) = self.value(a).shape();
        let scale = 1.0 / (1.0 - rate);
        let mut mask = Vec::with_capacity(r * c);
        for _ in 0..r * c {
            let u: f64 = rng.random();
            mask.push(if u < rate { 0.0 } else { scale });
        }
        let mut out = self.alloc(r, c);
        for ((o, x), m) in out.as_mut_slice().iter_mut().zip(self.value(a).iter()).zip(&mask) {
            *o = x * m;
        }
        let needs = self.needs(a);
        self.push(Rc::new(out), Op::Dropout { a, mask: mask.into_boxed_slice() }, needs)
    }

    /// Mean weighted-cosine similarity over heads.
    ///
    /// With `v: n×d` (one vector per node) and `w: m×d` (one nonnegative
    /// weight vector per head), computes the `n×n` matrix
    /// `S_ij = (1/m) Σ_k cos(w_k ⊙ v_i, w_k ⊙ v_j)`.
    ///
    /// Rows whose weighted norm falls at or below `floor` are divided by
    /// `floor` instead (a linear region, so the gradient stays exact). The
    /// output is exactly symmetric. Fused on the tape so that per-head score
    /// matrices are never materialized; the backward pass exploits sparsity
    /// of the incoming gradient (which thresholding upstream induces).
    pub fn multi_head_cos(&mut self, v: Var, w: Var, floor: f64) -> Var {
        let (n, d) = self.value(v).shape();
        let (m, wd) = self.value(w).shape();
        assert_eq!(d, wd, "multi_head_cos: v is {n}x{d} but w is {m}x{wd}");
        assert!(m >= 1, "multi_head_cos needs at least one head");
        assert!(floor > 0.0);

        let mut ucat = self.alloc(n, m * d);
        let mut norms = self.alloc(n, m);
        {
            let vv = self.value(v);
            let wv = self.value(w);
            for i in 0..n {
                let vrow = vv.row(i);
                for k in 0..m {
                    let wrow = wv.row(k);
                    let mut sq = 0.0;
                    for j in 0..d {
                        let p = vrow[j] * wrow[j];
                        sq += p * p;
                    }
                    let nrm = super::sqrt(sq);
                    norms[(i, k)] = nrm;
                    let inv = 1.0 / if nrm > floor { nrm } else { floor };
                    let dst = &mut ucat.row_mut(i)[k * d..(k + 1) * d];
                    for j in 0..d {
                        dst[j] = vrow[j] * wrow[j] * inv;
                    }
                }
            }
        }
        let mut out = self.alloc(n, n);
        mat::gram(out.as_mut_slice(), ucat.as_slice(), n, m * d, 1.0 / m as f64);
        let needs = self.needs(v) || self.needs(w);
        self.push(Rc::new(out), Op::MultiHeadCos { v, w, ucat, norms, floor }, needs)
    }

    /// Masked mean cross-entropy on softmaxed logits.
    ///
    /// `targets[i]` is the class of node `i`; only rows listed in `mask`
    /// (strictly increasing node indices, non-empty) contribute to the loss,
    /// averaged over the mask. Returns the scalar loss var and the full `n×C`
    /// probability matrix (softmax of every row, labeled or not).
    pub fn softmax_ce(
        &mut self,
        logits: Var,
        targets: Rc<[u32]>,
        mask: Rc<[u32]>,
    ) -> Result<(Var, Rc<Mat>)> {
        let (n, c) = self.value(logits).shape();
        if mask.is_empty() {
            return Err(Error::contract("softmax_ce: empty mask"));
        }
        if targets.len() != n {
            return Err(Error::contract(format!(
                "softmax_ce: {} targets for {n} rows",
                targets.len()
            )));
        }
        for pair in mask.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::contract("softmax_ce: mask must be strictly increasing"));
            }
        }
        if mask[mask.len() - 1] as usize >= n {
            return Err(Error::contract("softmax_ce: mask index out of range"));
        }

        let mut probs = self.alloc(n, c);
        super::mat::softmax_rows_into(&mut probs, self.value(logits));
        let mut loss = 0.0;
        for &i in mask.iter() {
            let y = targets[i as usize] as usize;
            if y >= c {
                return Err(Error::contract(format!(
                    "softmax_ce: target {y} out of range for {c} classes (node {i})"
                )));
            }
            loss -= super::ln(probs[(i as usize, y)]);
        }
        loss /= mask.len() as f64;

        let probs = Rc::new(probs);
        let needs = self.needs(logits);
        let var = self.push(
            Rc::new(Mat::scalar(loss)),
            Op::SoftmaxCe { logits, probs: Rc::clone(&probs), targets, mask },
            needs,
        );
        Ok((var, probs))
    }

    // -- backward ----------------------------------------------------------

    /// Reverse pass from a scalar `loss` node. Returns the gradients of all
    /// `requires_grad` leaves on the path; each recording supports exactly
    /// one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if loss.gen != self.gen || loss.idx as usize >= self.nodes.len() {
            return Err(Error::contract("backward: loss var is not from this recording"));
        }
        if self.spent {
            return Err(Error::contract(
                "backward called twice on one recording; reset() and re-record",
            ));
        }
        if !self.nodes[loss.idx as usize].value.is_scalar() {
            let (r, c) = self.nodes[loss.idx as usize].value.shape();
            return Err(Error::contract(format!("backward: loss must be 1x1, got {r}x{c}")));
        }
        self.spent = true;

        let len = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(len);
        grads.resize_with(len, || None);
        grads[loss.idx as usize] = Some(Mat::scalar(1.0));

        let mut out = Gradients { by_idx: BTreeMap::new(), gen: self.gen };

        for i in (0..=loss.idx as usize).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                self.pool.give(g.into_vec());
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                out.by_idx.insert(i as u32, g);
                continue;
            }
            self.pull_back(i, &g, &mut grads);
            self.pool.give(g.into_vec());
        }
        Ok(out)
    }

    /// Applies node `i`'s backward rule, accumulating into `grads`. Takes the
    /// op out of the node (the recording is spent after backward anyway) so
    /// its auxiliary data can be used while the pool and grads are mutated.
    fn pull_back(&mut self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),

            Op::MatMul { a, b } => {
                let (m, k) = self.value(a).shape();
                let n = self.value(b).cols();
                if self.needs(a) {
                    let bv = self.rc_value(b);
                    let (dst, fresh) = self.slot(grads, a, m, k, false);
                    mat::gemm_nt(dst.as_mut_slice(), !fresh, g.as_slice(), m, n, bv.as_slice(), k);
                }
                if self.needs(b) {
                    let av = self.rc_value(a);
                    let (dst, fresh) = self.slot(grads, b, k, n, false);
                    mat::gemm_tn(dst.as_mut_slice(), !fresh, av.as_slice(), m, k, g.as_slice(), n);
                }
            }

            Op::AddScaled { a, b, ca, cb } => {
                let (r, c) = self.value(a).shape();
                for (var, coef) in [(a, ca), (b, cb)] {
                    if self.needs(var) {
                        let (dst, fresh) = self.slot(grads, var, r, c, false);
                        axpy_or_set(dst.as_mut_slice(), fresh, coef, g.as_slice());
                    }
                }
            }

            Op::AddScaled3 { a, b, c, ca, cb, cc } => {
                let (r, cl) = self.value(a).shape();
                for (var, coef) in [(a, ca), (b, cb), (c, cc)] {
                    if self.needs(var) {
                        let (dst, fresh) = self.slot(grads, var, r, cl, false);
                        axpy_or_set(dst.as_mut_slice(), fresh, coef, g.as_slice());
                    }
                }
            }

            Op::Hadamard { a, b } => {
                let (r, c) = self.value(a).shape();
                if self.needs(a) {
                    let bv = self.rc_value(b);
                    let (dst, fresh) = self.slot(grads, a, r, c, false);
                    mul_into(dst.as_mut_slice(), fresh, g.as_slice(), bv.as_slice());
                }
                if self.needs(b) {
                    let av = self.rc_value(a);
                    let (dst, fresh) = self.slot(grads, b, r, c, false);
                    mul_into(dst.as_mut_slice(), fresh, g.as_slice(), av.as_slice());
                }
            }

            Op::Relu { a } | Op::Threshold { a } => {
                let (r, c) = self.value(a).shape();
                let y = Rc::clone(&self.nodes[i].value);
                let (dst, fresh) = self.slot(grads, a, r, c, false);
                masked_copy(dst.as_mut_slice(), fresh, g.as_slice(), y.as_slice());
            }

            Op::LogFloor { a, floor } => {
                let (r, c) = self.value(a).shape();
                let av = self.rc_value(a);
                let (dst, fresh) = self.slot(grads, a, r, c, false);
                let dv = dst.as_mut_slice();
                for (idx, (gv, xv)) in g.iter().zip(av.iter()).enumerate() {
                    let contrib = if *xv > floor { gv / xv } else { 0.0 };
                    if fresh {
                        dv[idx] = contrib;
                    } else {
                        dv[idx] += contrib;
                    }
                }
            }

            Op::RowSum { a } => {
                let (r, c) = self.value(a).shape();
                let (dst, fresh) = self.slot(grads, a, r, c, false);
                for row in 0..r {
                    let gv = g.as_slice()[row];
                    for dvj in &mut dst.as_mut_slice()[row * c..(row + 1) * c] {
                        if fresh {
                            *dvj = gv;
                        } else {
                            *dvj += gv;
                        }
                    }
                }
            }

            Op::Sum { a } => {
                let (r, c) = self.value(a).shape();
                let gv = g.scalar_value();
                let (dst, fresh) = self.slot(grads, a, r, c, false);
                for dvj in dst.as_mut_slice() {
                    if fresh {
                        *dvj = gv;
                    } else {
                        *dvj += gv;
                    }
                }
            }

            Op::Dot { a, b } => {
                let (r, c) = self.value(a).shape();
                let gv = g.scalar_value();
                if self.needs(a) {
                    let bv = self.rc_value(b);
                    let (dst, fresh) = self.slot(grads, a, r, c, false);
                    axpy_or_set(dst.as_mut_slice(), fresh, gv, bv.as_slice());
                }
                if self.needs(b) {
                    let av = self.rc_value(a);
                    let (dst, fresh) = self.slot(grads, b, r, c, false);
                    axpy_or_set(dst.as_mut_slice(), fresh, gv, av.as_slice());
                }
            }

            Op::RowNormalize { a, floor, sums } => {
                let (r, c) = self.value(a).shape();
                let y = Rc::clone(&self.nodes[i].value);
                let (dst, fresh) = self.slot(grads, a, r, c, false);
                for row in 0..r {
                    let grow = &g.as_slice()[row * c..(row + 1) * c];
                    let drow = &mut dst.as_mut_slice()[row * c..(row + 1) * c];
                    let s = sums[row];
                    if s > floor {
                        let inner = mat::dot_slices(grow, y.row(row));
                        let inv = 1.0 / s;
                        for j in 0..c {
                            let contrib = (grow[j] - inner) * inv;
                            if fresh {
                                drow[j] = contrib;
                            } else {
                                drow[j] += contrib;
                            }
                        }
                    } else if fresh {
                        drow.copy_from_slice(grow);
                    } else {
                        for j in 0..c {
                            drow[j] += grow[j];
                        }
                    }
                }
            }

            Op::Dropout { a, mask } => {
                let (r, c) = self.value(a).shape();
                let (dst, fresh) = self.slot(grads, a, r, c, false);
                mul_into(dst.as_mut_slice(), fresh, g.as_slice(), &mask);
            }

            Op::MultiHeadCos { v, w, ucat, norms, floor } => {
                self.pull_back_mhc(v, w, &ucat, &norms, floor, g, grads);
                self.pool.give(ucat.into_vec());
                self.pool.give(norms.into_vec());
            }

            Op::SoftmaxCe { logits, probs, targets, mask } => {
                let (n, c) = self.value(logits).shape();
                let w = g.scalar_value() / mask.len() as f64;
                let (dst, _) = self.slot(grads, logits, n, c, true);
                for &row in mask.iter() {
                    let row = row as usize;
                    let prow = probs.row(row);
                    let drow = &mut dst.as_mut_slice()[row * c..(row + 1) * c];
                    let y = targets[row] as usize;
                    for j in 0..c {
                        drow[j] += w * (prow[j] - if j == y { 1.0 } else { 0.0 });
                    }
                }
            }
        }
    }

    /// Backward rule of [`Tape::multi_head_cos`]. With `S = (1/m) Û Ûᵀ`
    /// (per-head unit rows concatenated), the gradient reaching `Û` is
    /// `(1/m)(G + Gᵀ)Û`; that product is computed sparsely whenever upstream
    /// thresholding left `G` mostly zero. The rest undoes the row
    /// normalization and the head weighting per row.
    #[allow(clippy::too_many_arguments)]
    fn pull_back_mhc(
        &mut self,
        v: Var,
        w: Var,
        ucat: &Mat,
        norms: &Mat,
        floor: f64,
        g: &Mat,
        grads: &mut [Option<Mat>],
    ) {
        let (n, d) = self.value(v).shape();
        let m = self.value(w).rows();
        let md = m * d;

        // M = (G + Gᵀ)/m, assembled via a blocked transpose (cache-friendly).
        let mut mbuf = Mat::from_buffer(n, n, self.pool.take_uninit(n * n));
        mat::transpose_into(mbuf.as_mut_slice(), g.as_slice(), n, n);
        let inv_m = 1.0 / m as f64;
        let mut nnz = 0usize;
        {
            let mv = mbuf.as_mut_slice();
            let gv = g.as_slice();
            for idx in 0..mv.len() {
                let s = (mv[idx] + gv[idx]) * inv_m;
                mv[idx] = s;
                nnz += (s != 0.0) as usize;
            }
        }

        // dÛ = M Û, sparse row-gather when M is mostly zeros.
        let mut ducat = Mat::from_buffer(n, md, self.pool.take_uninit(n * md));
        let density = nnz as f64 / (n * n) as f64;
        if density <= 0.15 {
            for row in 0..n {
                let mrow = mbuf.row(row);
                let drow = &mut ducat.as_mut_slice()[row * md..(row + 1) * md];
                drow.fill(0.0);
                for (j, &mv) in mrow.iter().enumerate() {
                    if mv != 0.0 {
                        let urow = &ucat.as_slice()[j * md..(j + 1) * md];
                        for (dj, uj) in drow.iter_mut().zip(urow) {
                            *dj += mv * uj;
                        }
                    }
                }
            }
        } else {
            mat::gemm_nn(ducat.as_mut_slice(), false, mbuf.as_slice(), n, n, ucat.as_slice(), md);
        }

        // Per row and head: undo normalization, then split into dW and dV.
        let vv = self.rc_value(v);
        let wv = self.rc_value(w);
        let mut dw =
            if self.needs(w) { Some(self.take_grad_or_zeroed(grads, w, m, d)) } else { None };
        let mut dv =
            if self.needs(v) { Some(self.take_grad_or_zeroed(grads, v, n, d)) } else { None };
        let mut prow = vec![0.0f64; d];
        for row in 0..n {
            let vrow = vv.row(row);
            for k in 0..m {
                let ub = &ucat.row(row)[k * d..(k + 1) * d];
                let db = &ducat.row(row)[k * d..(k + 1) * d];
                let nrm = norms[(row, k)];
                if nrm > floor {
                    let ip = mat::dot_slices(db, ub);
                    let inv = 1.0 / nrm;
                    for j in 0..d {
                        prow[j] = (db[j] - ub[j] * ip) * inv;
                    }
                } else {
                    let inv = 1.0 / floor;
                    for j in 0..d {
                        prow[j] = db[j] * inv;
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    let dwrow = dw.row_mut(k);
                    for j in 0..d {
                        dwrow[j] += prow[j] * vrow[j];
                    }
                }
                if let Some(dv) = dv.as_mut() {
                    let wrow = wv.row(k);
                    let dvrow = dv.row_mut(row);
                    for j in 0..d {
                        dvrow[j] += prow[j] * wrow[j];
                    }
                }
            }
        }
        if let Some(dwm) = dw {
            grads[w.idx as usize] = Some(dwm);
        }
        if let Some(dvm) = dv {
            grads[v.idx as usize] = Some(dvm);
        }
        self.pool.give(mbuf.into_vec());
        self.pool.give(ducat.into_vec());
    }

    /// Fetches (allocating if needed) the gradient slot for `var`, returning
    /// the buffer and whether it is fresh (fresh ⇒ contents are undefined and
    /// must be fully overwritten, unless `zeroed` was requested).
    fn slot<'g>(
        &mut self,
        grads: &'g mut [Option<Mat>],
        var: Var,
        rows: usize,
        cols: usize,
        zeroed: bool,
    ) -> (&'g mut Mat, bool) {
        let idx = var.idx as usize;
        let fresh = grads[idx].is_none();
        if fresh {
            let buf = if zeroed {
                self.pool.take_zeroed(rows * cols)
            } else {
                self.pool.take_uninit(rows * cols)
            };
            grads[idx] = Some(Mat::from_buffer(rows, cols, buf));
        }
        (grads[idx].as_mut().unwrap(), fresh && !zeroed)
    }

    /// Like [`Tape::slot`] but removes the Mat from the table for mutation
    /// without aliasing `self` (used by the multi-head rule).
    fn take_grad_or_zeroed(
        &mut self,
        grads: &mut [Option<Mat>],
        var: Var,
        rows: usize,
        cols: usize,
    ) -> Mat {
        let idx = var.idx as usize;
        grads[idx]
            .take()
            .unwrap_or_else(|| Mat::from_buffer(rows, cols, self.pool.take_zeroed(rows * cols)))
    }
}

/// `dst (=|+=) alpha · g`.
fn axpy_or_set(dst: &mut [f64], fresh: bool, alpha: f64, g: &[f64]) {
    if fresh {
        for (d, x) in dst.iter_mut().zip(g) {
            *d = alpha * x;
        }
    } else {
        for (d, x) in dst.iter_mut().zip(g) {
            *d += alpha * x;
        }
    }
}

/// `dst (=|+=) g ⊙ b`.
fn mul_into(dst: &mut [f64], fresh: bool, g: &[f64], b: &[f64]) {
    if fresh {
        for ((d, x), y) in dst.iter_mut().zip(g).zip(b) {
            *d = x * y;
        }
    } else {
        for ((d, x), y) in dst.iter_mut().zip(g).zip(b) {
            *d += x * y;
        }
    }
}

/// `dst (=|+=) g` where the forward output `y` is nonzero, else 0.
fn masked_copy(dst: &mut [f64], fresh: bool, g: &[f64], y: &[f64]) {
    if fresh {
        for ((d, x), yv) in dst.iter_mut().zip(g).zip(y) {
            *d = if *yv != 0.0 { *x } else { 0.0 };
        }
    } else {
        for ((d, x), yv) in dst.iter_mut().zip(g).zip(y) {
            if *yv != 0.0 {
                *d += x;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: &Mat, b: &Mat, tol: f64) {
        assert_eq!(a.shape(), b.shape(), "shape mismatch");
        for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
            assert!(
                (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())),
                "entry {i}: {x} vs {y}"
            );
        }
    }

    /// Central-difference gradient of a scalar function of one matrix.
    fn fd_grad(mut f: impl FnMut(&Mat) -> f64, x: &Mat, h: f64) -> Mat {
        let mut g = Mat::zeros(x.rows(), x.cols());
        for idx in 0..x.rows() * x.cols() {
            let mut xp = x.clone();
            xp.as_mut_slice()[idx] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[idx] -= h;
            g.as_mut_slice()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn matmul_forward_and_backward() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = t.leaf(Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = t.matmul(a, b);
        assert_eq!(t.value(c), &Mat::from_vec(2, 2, vec![58.0, 64.0, 139.0, 154.0]));

        // loss = Σ C ⇒ G = 1s, dA = 1·Bᵀ (row sums of B per column), dB = Aᵀ·1.
        let loss = t.sum(c);
        let mut g = t.backward(loss).unwrap();
        let da = g.take(a).unwrap();
        let db = g.take(b).unwrap();
        assert_eq!(da, Mat::from_vec(2, 3, vec![15.0, 19.0, 23.0, 15.0, 19.0, 23.0]));
        assert_eq!(db, Mat::from_vec(3, 2, vec![5.0, 5.0, 7.0, 7.0, 9.0, 9.0]));
    }

    #[test]
    fn squared_frobenius_norm_gradient_is_twice_the_matrix() {
        let mut t = Tape::new();
        let w = t.leaf(Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let loss = t.dot(w, w);
        assert_eq!(t.value(loss).scalar_value(), 30.0);
        let mut g = t.backward(loss).unwrap();
        assert_eq!(g.take(w).unwrap(), Mat::from_vec(2, 2, vec![2.0, 4.0, 6.0, 8.0]));
    }

    #[test]
    fn add_scaled_and_hadamard_backward() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::from_vec(1, 3, vec![1.0, -2.0, 3.0]));
        let b = t.leaf(Mat::from_vec(1, 3, vec![4.0, 5.0, -6.0]));
        let s = t.add_scaled(a, b, 2.0, -0.5);
        assert_eq!(t.value(s), &Mat::from_vec(1, 3, vec![0.0, -6.5, 9.0]));
        let h = t.hadamard(s, b);
        let loss = t.sum(h);
        let mut g = t.backward(loss).unwrap();
        // d(s)/da = 2, weighted by b via the hadamard: dL/da = 2·b.
        assert_eq!(g.take(a).unwrap(), Mat::from_vec(1, 3, vec![8.0, 10.0, -12.0]));
        // dL/db = -0.5·b (through s) + s (direct hadamard term).
        assert_eq!(g.take(b).unwrap(), Mat::from_vec(1, 3, vec![-2.0, -9.0, 12.0]));
    }

    #[test]
    fn add_scaled3_matches_two_chained() {
        let am = Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let bm = Mat::from_vec(2, 2, vec![-1.0, 0.5, 2.0, -3.0]);
        let cm = Mat::from_vec(2, 2, vec![10.0, 20.0, 30.0, 40.0]);
        let mut t = Tape::new();
        let (a, b, c) = (t.leaf(am.clone()), t.leaf(bm.clone()), t.leaf(cm.clone()));
        let out = t.add_scaled3(a, b, c, 0.3, 0.5, 0.2);
        for i in 0..4 {
            let want = 0.3 * am.as_slice()[i] + 0.5 * bm.as_slice()[i] + 0.2 * cm.as_slice()[i];
            assert!((t.value(out).as_slice()[i] - want).abs() < 1e-15);
        }
        let w = t.constant(Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let loss = t.dot(out, w);
        let mut g = t.backward(loss).unwrap();
        assert_close(&g.take(a).unwrap(), &Mat::from_vec(2, 2, vec![0.3, 0.6, 0.9, 1.2]), 1e-15);
        assert_close(&g.take(b).unwrap(), &Mat::from_vec(2, 2, vec![0.5, 1.0, 1.5, 2.0]), 1e-15);
        assert_close(&g.take(c).unwrap(), &Mat::from_vec(2, 2, vec![0.2, 0.4, 0.6, 0.8]), 1e-15);
    }

    #[test]
    fn relu_zeroes_negatives_and_kinks_carry_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::from_vec(1, 4, vec![-1.5, 0.0, 2.0, -0.0]));
        let y = t.relu(a);
        assert_eq!(t.value(y), &Mat::from_vec(1, 4, vec![0.0, 0.0, 2.0, 0.0]));
        let loss = t.sum(y);
        let mut g = t.backward(loss).unwrap();
        assert_eq!(g.take(a).unwrap(), Mat::from_vec(1, 4, vec![0.0, 0.0, 1.0, 0.0]));
    }

    #[test]
    fn threshold_keeps_strictly_above_eps() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::from_vec(1, 4, vec![0.2, 0.5, 0.75, 0.9]));
        let y = t.threshold(a, 0.75);
        assert_eq!(t.value(y), &Mat::from_vec(1, 4, vec![0.0, 0.0, 0.0, 0.9]));
        let loss = t.sum(y);
        let mut g = t.backward(loss).unwrap();
        assert_eq!(g.take(a).unwrap(), Mat::from_vec(1, 4, vec![0.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    #[should_panic(expected = "eps >= 0")]
    fn threshold_rejects_negative_eps() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::zeros(1, 1));
        t.threshold(a, -0.1);
    }

    #[test]
    fn log_floor_values_count_and_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::from_vec(1, 3, vec![2.0, 1e-15, 0.5]));
        let (y, floored) = t.log_floor(a, 1e-12);
        assert_eq!(floored, 1);
        let yv = t.value(y).as_slice().to_vec();
        assert!((yv[0] - 2.0f64.ln()).abs() < 1e-15);
        assert!((yv[1] - 1e-12f64.ln()).abs() < 1e-12);
        assert!((yv[2] - 0.5f64.ln()).abs() < 1e-15);
        let loss = t.sum(y);
        let mut g = t.backward(loss).unwrap();
        assert_eq!(g.take(a).unwrap(), Mat::from_vec(1, 3, vec![0.5, 0.0, 2.0]));
    }

    #[test]
    fn row_sum_sum_dot_values_and_gradients() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let rs = t.row_sum(a);
        assert_eq!(t.value(rs), &Mat::from_vec(2, 1, vec![6.0, 15.0]));
        let wv = t.constant(Mat::from_vec(2, 1, vec![10.0, -1.0]));
        let loss = t.dot(rs, wv);
        assert_eq!(t.value(loss).scalar_value(), 45.0);
        let mut g = t.backward(loss).unwrap();
        // dL/da_ij = w_i broadcast across the row.
        assert_eq!(
            g.take(a).unwrap(),
            Mat::from_vec(2, 3, vec![10.0, 10.0, 10.0, -1.0, -1.0, -1.0])
        );
    }

    #[test]
    fn row_normalize_values_and_zero_row_passthrough() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::from_vec(2, 2, vec![1.0, 3.0, 0.0, 0.0]));
        let y = t.row_normalize(a, 1e-12);
        assert_eq!(t.value(y), &Mat::from_vec(2, 2, vec![0.25, 0.75, 0.0, 0.0]));
        let w = t.constant(Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let loss = t.dot(y, w);
        let mut g = t.backward(loss).unwrap();
        let da = g.take(a).unwrap();
        // Row 0: d(x_j/s)/dx_l = (δ_jl − x_j/s)/s; dL = Σ_j w_j y_j.
        // inner = 1·0.25 + 2·0.75 = 1.75, so da_0l = (w_l − 1.75)/4.
        let want0 = [(1.0 - 1.75) / 4.0, (2.0 - 1.75) / 4.0];
        assert!((da[(0, 0)] - want0[0]).abs() < 1e-15);
        assert!((da[(0, 1)] - want0[1]).abs() < 1e-15);
        // Zero row passes gradient through unchanged.
        assert_eq!(da[(1, 0)], 3.0);
        assert_eq!(da[(1, 1)], 4.0);
    }

    #[test]
    fn row_normalize_gradient_matches_finite_differences() {
        let x = Mat::from_vec(2, 3, vec![0.9, 0.1, 0.4, 0.2, 0.7, 0.3]);
        let w = Mat::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.25, -1.0]);
        let f = |x: &Mat| {
            let mut t = Tape::new();
            let a = t.leaf(x.clone());
            let y = t.row_normalize(a, 1e-12);
            let c = t.constant(w.clone());
            let loss = t.dot(y, c);
            t.value(loss).scalar_value()
        };
        let mut t = Tape::new();
        let a = t.leaf(x.clone());
        let y = t.row_normalize(a, 1e-12);
        let c = t.constant(w.clone());
        let loss = t.dot(y, c);
        let mut g = t.backward(loss).unwrap();
        assert_close(&g.take(a).unwrap(), &fd_grad(f, &x, 1e-6), 1e-8);
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = Tape::new();
        let a = t.leaf(Mat::from_vec(1, 4, vec![1.0, -2.0, 3.0, -4.0]));
        let y = t.dropout(a, 0.0, &mut rng);
        assert_eq!(t.value(y), &Mat::from_vec(1, 4, vec![1.0, -2.0, 3.0, -4.0]));
    }

    #[test]
    fn dropout_scales_kept_entries_and_is_seed_deterministic() {
        let x = Mat::filled(8, 8, 1.0);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tape::new();
            let a = t.leaf(x.clone());
            let y = t.dropout(a, 0.5, &mut rng);
            let out = t.value(y).clone();
            let loss = t.sum(y);
            let mut g = t.backward(loss).unwrap();
            (out, g.take(a).unwrap())
        };
        let (y1, g1) = run(42);
        let (y2, g2) = run(42);
        assert_eq!(y1, y2);
        assert_eq!(g1, g2);
        let (y3, _) = run(43);
        assert_ne!(y1, y3, "different seeds should give different masks");
        let mut kept = 0;
        for v in y1.iter() {
            assert!(*v == 0.0 || *v == 2.0, "inverted dropout at rate .5 scales by 2");
            kept += (*v != 0.0) as usize;
        }
        assert!(kept > 10 && kept < 54, "kept {kept}/64 looks degenerate");
        // Backward is exactly the mask.
        assert_eq!(g1, y1);
    }

    /// Naive per-head oracle: S_ij = (1/m) Σ_k cos(w_k ⊙ v_i, w_k ⊙ v_j)
    /// with norms floored before dividing.
    fn mhc_oracle(v: &Mat, w: &Mat, floor: f64) -> Mat {
        let (n, d) = v.shape();
        let m = w.rows();
        let mut s = Mat::zeros(n, n);
        for k in 0..m {
            let mut weighted = Mat::zeros(n, d);
            for i in 0..n {
                for j in 0..d {
                    weighted[(i, j)] = v[(i, j)] * w[(k, j)];
                }
            }
            for i in 0..n {
                for j in 0..n {
                    let mut ip = 0.0;
                    let mut ni = 0.0;
                    let mut nj = 0.0;
                    for l in 0..d {
                        ip += weighted[(i, l)] * weighted[(j, l)];
                        ni += weighted[(i, l)] * weighted[(i, l)];
                        nj += weighted[(j, l)] * weighted[(j, l)];
                    }
                    s[(i, j)] += ip / (ni.sqrt().max(floor) * nj.sqrt().max(floor));
                }
            }
        }
        for e in s.as_mut_slice() {
            *e /= m as f64;
        }
        s
    }

    #[test]
    fn multi_head_cos_matches_naive_oracle() {
        let v = Mat::from_vec(3, 2, vec![1.0, 0.0, 1.0, 1.0, -0.5, 2.0]);
        let w = Mat::from_vec(2, 2, vec![1.0, 1.0, 0.25, 2.0]);
        let mut t = Tape::new();
        let (vv, wv) = (t.leaf(v.clone()), t.leaf(w.clone()));
        let s = t.multi_head_cos(vv, wv, 1e-8);
        assert_close(t.value(s), &mhc_oracle(&v, &w, 1e-8), 1e-12);
    }

    #[test]
    fn multi_head_cos_is_exactly_symmetric_with_unit_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Mat::from_fn(5, 4, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let w = Mat::from_fn(3, 4, |_, _| rand::Rng::random_range(&mut rng, 0.1..1.0));
        let mut t = Tape::new();
        let (vv, wv) = (t.leaf(v), t.leaf(w));
        let s = t.multi_head_cos(vv, wv, 1e-8);
        let sv = t.value(s);
        for i in 0..5 {
            assert!((sv[(i, i)] - 1.0).abs() < 1e-12, "diagonal cosine of a nonzero row is 1");
            for j in 0..5 {
                assert_eq!(sv[(i, j)].to_bits(), sv[(j, i)].to_bits(), "exact symmetry");
            }
        }
    }

    #[test]
    fn multi_head_cos_is_scale_invariant_per_node() {
        let v1 = Mat::from_vec(2, 3, vec![1.0, 2.0, -1.0, 0.5, -0.25, 1.5]);
        let mut v2 = v1.clone();
        for x in &mut v2.as_mut_slice()[..3] {
            *x *= 37.0; // rescale node 0 only
        }
        let w = Mat::from_vec(2, 3, vec![1.0, 0.5, 2.0, 0.1, 1.0, 0.3]);
        let mk = |v: &Mat| {
            let mut t = Tape::new();
            let (vv, wv) = (t.leaf(v.clone()), t.leaf(w.clone()));
            let s = t.multi_head_cos(vv, wv, 1e-8);
            t.value(s).clone()
        };
        assert_close(&mk(&v1), &mk(&v2), 1e-12);
    }

    #[test]
    fn multi_head_cos_gradient_matches_finite_differences() {
        // Asymmetric downstream weights exercise the (G + Gᵀ) term.
        let v0 = Mat::from_vec(4, 3, vec![1.0, 0.2, -0.5, 0.8, 1.1, 0.3, -0.7, 0.4, 0.9, 0.1, -1.2, 0.6]);
        let w0 = Mat::from_vec(2, 3, vec![0.9, 0.4, 1.2, 0.3, 1.0, 0.7]);
        let cm = Mat::from_fn(4, 4, |i, j| ((3 * i + 5 * j + 1) % 7) as f64 - 3.0);
        let f = |v: &Mat, w: &Mat| {
            let mut t = Tape::new();
            let (vv, wv) = (t.leaf(v.clone()), t.leaf(w.clone()));
            let s = t.multi_head_cos(vv, wv, 1e-8);
            let c = t.constant(cm.clone());
            let loss = t.dot(s, c);
            t.value(loss).scalar_value()
        };
        let mut t = Tape::new();
        let (vv, wv) = (t.leaf(v0.clone()), t.leaf(w0.clone()));
        let s = t.multi_head_cos(vv, wv, 1e-8);
        let c = t.constant(cm.clone());
        let loss = t.dot(s, c);
        let mut g = t.backward(loss).unwrap();
        let (dv, dw) = (g.take(vv).unwrap(), g.take(wv).unwrap());
        assert_close(&dv, &fd_grad(|v| f(v, &w0), &v0, 1e-6), 1e-7);
        assert_close(&dw, &fd_grad(|w| f(&v0, w), &w0, 1e-6), 1e-7);
    }

    #[test]
    fn multi_head_cos_sparse_backward_path_matches_finite_differences() {
        // 10 nodes with two planted near-duplicate pairs. Thresholding at
        // 0.99 keeps the diagonal plus both pairs: 14/100 = 0.14 density,
        // which takes the sparse row-gather branch — and unlike diagonal
        // entries (constant 1, zero gradient), the planted pairs carry real
        // gradient through it.
        let b0 = [1.0, 0.2, -0.3];
        let b1 = [-0.5, 1.0, 0.4];
        #[rustfmt::skip]
        let v0 = Mat::from_vec(10, 3, vec![
            b0[0], b0[1], b0[2],
            b0[0] * 1.02 + 0.001, b0[1] * 1.02 - 0.002, b0[2] * 1.02 + 0.001,
            b1[0], b1[1], b1[2],
            b1[0] * 0.9 - 0.001, b1[1] * 0.9 + 0.001, b1[2] * 0.9 + 0.002,
            1.0, 0.0, 0.0,
            0.0, 1.0, 0.0,
            0.0, 0.0, 1.0,
            1.0, -1.0, 0.5,
            -1.0, -0.5, 1.0,
            0.3, -1.0, -1.0,
        ]);
        let w0 = Mat::from_vec(1, 3, vec![1.0, 0.8, 1.3]);
        let cm = Mat::from_fn(10, 10, |i, j| (i + 2 * j) as f64 * 0.1 + 0.5);
        let f = |v: &Mat, w: &Mat| {
            let mut t = Tape::new();
            let (vv, wv) = (t.leaf(v.clone()), t.leaf(w.clone()));
            let s = t.multi_head_cos(vv, wv, 1e-8);
            let a = t.threshold(s, 0.99);
            let c = t.constant(cm.clone());
            let loss = t.dot(a, c);
            t.value(loss).scalar_value()
        };
        // Every off-diagonal cosine must sit well clear of the threshold on
        // either side, or the FD probes would cross the kink.
        {
            let s = mhc_oracle(&v0, &w0, 1e-8);
            let mut kept = 0;
            for i in 0..10 {
                for j in 0..10 {
                    if i != j {
                        let v = s[(i, j)];
                        assert!(
                            v < 0.97 || v > 0.995,
                            "fixture cosine {v} at ({i},{j}) too close to threshold"
                        );
                        kept += (v > 0.995) as usize;
                    }
                }
            }
            assert_eq!(kept, 4, "expected exactly the two planted pairs to survive");
        }
        let mut t = Tape::new();
        let (vv, wv) = (t.leaf(v0.clone()), t.leaf(w0.clone()));
        let s = t.multi_head_cos(vv, wv, 1e-8);
        let a = t.threshold(s, 0.99);
        let c = t.constant(cm.clone());
        let loss = t.dot(a, c);
        let mut g = t.backward(loss).unwrap();
        let (dv, dw) = (g.take(vv).unwrap(), g.take(wv).unwrap());
        assert!(dv.frob_sq() > 1e-6, "planted pairs must carry nonzero gradient");
        assert_close(&dv, &fd_grad(|v| f(v, &w0), &v0, 1e-6), 1e-7);
        assert_close(&dw, &fd_grad(|w| f(&v0, w), &w0, 1e-6), 1e-7);
    }

    #[test]
    fn softmax_ce_loss_probs_and_gradient() {
        let logits = Mat::from_vec(3, 2, vec![1.0, -1.0, 0.0, 0.0, 2.0, 1.0]);
        let targets: Rc<[u32]> = Rc::from(vec![0u32, 1, 1].into_boxed_slice());
        let mask: Rc<[u32]> = Rc::from(vec![0u32, 2].into_boxed_slice());
        let mut t = Tape::new();
        let l = t.leaf(logits.clone());
        let (loss, probs) = t.softmax_ce(l, Rc::clone(&targets), Rc::clone(&mask)).unwrap();

        // Hand oracle: p = softmax per row, loss = mean over mask of −ln p_y.
        let p00 = 1.0 / (1.0 + (-2.0f64).exp());
        let p21 = 1.0 / (1.0 + 1.0f64.exp());
        let want = -(p00.ln() + p21.ln()) / 2.0;
        assert!((t.value(loss).scalar_value() - want).abs() < 1e-14);

        for i in 0..3 {
            let s: f64 = probs.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-14, "softmax rows sum to 1 (row {i})");
        }

        let mut g = t.backward(loss).unwrap();
        let dl = g.take(l).unwrap();
        // Masked rows: (p − onehot)/|mask|; unmasked row 1: zero.
        assert!((dl[(0, 0)] - (p00 - 1.0) / 2.0).abs() < 1e-14);
        assert!((dl[(0, 1)] - (1.0 - p00) / 2.0).abs() < 1e-14);
        assert_eq!(dl[(1, 0)], 0.0);
        assert_eq!(dl[(1, 1)], 0.0);
        assert!((dl[(2, 0)] - (1.0 - p21) / 2.0).abs() < 1e-14);
        assert!((dl[(2, 1)] - (p21 - 1.0) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn softmax_ce_gradient_matches_finite_differences() {
        let logits = Mat::from_vec(4, 3, vec![
            0.5, -0.2, 0.1, 1.0, 0.0, -1.0, 0.3, 0.3, 0.3, -0.5, 0.8, 0.2,
        ]);
        let targets: Rc<[u32]> = Rc::from(vec![2u32, 0, 1, 2].into_boxed_slice());
        let mask: Rc<[u32]> = Rc::from(vec![0u32, 1, 3].into_boxed_slice());
        let f = |x: &Mat| {
            let mut t = Tape::new();
            let l = t.leaf(x.clone());
            let (loss, _) = t.softmax_ce(l, Rc::clone(&targets), Rc::clone(&mask)).unwrap();
            t.value(loss).scalar_value()
        };
        let mut t = Tape::new();
        let l = t.leaf(logits.clone());
        let (loss, _) = t.softmax_ce(l, Rc::clone(&targets), Rc::clone(&mask)).unwrap();
        let mut g = t.backward(loss).unwrap();
        assert_close(&g.take(l).unwrap(), &fd_grad(f, &logits, 1e-6), 1e-9);
    }

    #[test]
    fn softmax_ce_rejects_bad_inputs() {
        let mk = || {
            let mut t = Tape::new();
            let l = t.leaf(Mat::zeros(3, 2));
            (t, l)
        };
        let targets: Rc<[u32]> = Rc::from(vec![0u32, 1, 0].into_boxed_slice());

        let (mut t, l) = mk();
        let empty: Rc<[u32]> = Rc::from(Vec::<u32>::new().into_boxed_slice());
        assert!(t.softmax_ce(l, Rc::clone(&targets), empty).is_err());

        let (mut t, l) = mk();
        let unsorted: Rc<[u32]> = Rc::from(vec![1u32, 1].into_boxed_slice());
        assert!(t.softmax_ce(l, Rc::clone(&targets), unsorted).is_err());

        let (mut t, l) = mk();
        let oob: Rc<[u32]> = Rc::from(vec![0u32, 3].into_boxed_slice());
        assert!(t.softmax_ce(l, Rc::clone(&targets), oob).is_err());

        let (mut t, l) = mk();
        let short: Rc<[u32]> = Rc::from(vec![0u32, 1].into_boxed_slice());
        let mask: Rc<[u32]> = Rc::from(vec![0u32].into_boxed_slice());
        assert!(t.softmax_ce(l, short, Rc::clone(&mask)).is_err());

        let (mut t, l) = mk();
        let big: Rc<[u32]> = Rc::from(vec![0u32, 9, 0].into_boxed_slice());
        let mask1: Rc<[u32]> = Rc::from(vec![1u32].into_boxed_slice());
        assert!(t.softmax_ce(l, big, mask1).is_err());
    }

    #[test]
    fn fanout_accumulates_gradients_from_both_uses() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::from_vec(1, 2, vec![3.0, 4.0]));
        let b = t.constant(Mat::from_vec(1, 2, vec![10.0, 100.0]));
        let h = t.hadamard(a, b); // 30, 400
        let s1 = t.sum(h); // d/da = b
        let s2 = t.sum(a); // d/da = 1
        let loss = t.add_scaled(s1, s2, 1.0, 1.0);
        let mut g = t.backward(loss).unwrap();
        assert_eq!(g.take(a).unwrap(), Mat::from_vec(1, 2, vec![11.0, 101.0]));
        assert!(g.take(b).is_none(), "constants receive no gradient");
    }

    #[test]
    fn backward_errors_on_misuse() {
        let mut t = Tape::new();
        let bad = Var { idx: 0, gen: 5 };
        assert!(t.backward(bad).is_err(), "empty tape");

        let a = t.leaf(Mat::from_vec(1, 2, vec![1.0, 2.0]));
        assert!(t.backward(a).is_err(), "non-scalar loss");

        let loss = t.sum(a);
        assert!(t.backward(loss).is_ok());
        assert!(t.backward(loss).is_err(), "second backward on a spent recording");
    }

    #[test]
    #[should_panic(expected = "spent tape")]
    fn recording_on_spent_tape_panics() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::scalar(1.0));
        let loss = t.sum(a);
        t.backward(loss).unwrap();
        t.leaf(Mat::scalar(2.0));
    }

    #[test]
    #[should_panic(expected = "different tape generation")]
    fn stale_var_after_reset_panics() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::scalar(1.0));
        t.reset();
        t.value(a);
    }

    #[test]
    fn reset_allows_rerecording_with_identical_results() {
        let run = |t: &mut Tape| {
            let a = t.leaf(Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
            let b = t.leaf(Mat::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.25]));
            let c = t.matmul(a, b);
            let r = t.relu(c);
            let loss = t.sum(r);
            let lv = t.value(loss).scalar_value();
            let mut g = t.backward(loss).unwrap();
            (lv, g.take(a).unwrap(), g.take(b).unwrap())
        };
        let mut t = Tape::new();
        let first = run(&mut t);
        for _ in 0..3 {
            t.reset();
            let again = run(&mut t);
            assert_eq!(first.0.to_bits(), again.0.to_bits());
            assert_eq!(first.1, again.1);
            assert_eq!(first.2, again.2);
        }
        t.reset();
        assert!(t.is_empty());
    }

    #[test]
    fn gradients_are_unaffected_by_nodes_after_the_loss() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::from_vec(1, 2, vec![1.0, 2.0]));
        let loss = t.sum(a);
        let b = t.leaf(Mat::from_vec(1, 2, vec![5.0, 6.0]));
        let _later = t.hadamard(a, b);
        let mut g = t.backward(loss).unwrap();
        assert_eq!(g.take(a).unwrap(), Mat::from_vec(1, 2, vec![1.0, 1.0]));
        assert!(g.take(b).is_none());
    }
}
