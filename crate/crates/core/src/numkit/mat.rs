//! Dense row-major `f64` matrices and the handful of kernels the rest of the
//! crate spends its time in.
//!
//! Everything here is single-threaded and deterministic: reductions run in a
//! fixed order, so repeated runs on the same machine produce bit-identical
//! results. The three matmul variants and the Gram kernel are blocked for
//! cache reuse and compiled in two flavors (portable, FMA) selected once at
//! runtime; the FMA flavor is used on x86-64 when the `std` feature allows
//! detection. Zero entries in the left operand are skipped, which makes the
//! same kernels serviceable for the sparse normalized adjacencies that kNN
//! graphs produce.

use alloc::vec;
use alloc::vec::Vec;

/// Dense row-major matrix. Scalars are represented as `1×1`, column vectors
/// as `n×1`.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl core::fmt::Debug for Mat {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Mat({}x{})", self.rows, self.cols)?;
        if self.rows * self.cols <= 64 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat { rows, cols, data: vec![value; rows * cols] }
    }

    /// Builds a matrix from row-major data. Panics if `data.len() != rows*cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "Mat::from_vec: {} values for a {rows}x{cols} matrix",
            data.len()
        );
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn eye(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![value] }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// Value of a `1×1` matrix. Panics on any other shape.
    #[inline]
    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "scalar_value on a {}x{} matrix", self.rows, self.cols);
        self.data[0]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Reinterprets a flat buffer as `rows×cols` without copying.
    /// Panics if the length does not match.
    pub fn from_buffer(rows: usize, cols: usize, mut data: Vec<f64>) -> Self {
        assert!(data.len() >= rows * cols && data.capacity() >= rows * cols);
        data.truncate(rows * cols);
        Mat { rows, cols, data }
    }

    pub fn iter(&self) -> core::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frob_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Squared Frobenius distance `‖a − b‖²_F`. Panics on shape mismatch.
    pub fn frob_dist_sq(a: &Mat, b: &Mat) -> f64 {
        assert_eq!(a.shape(), b.shape(), "frob_dist_sq shape mismatch");
        a.data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| {
                let d = x - y;
                d * d
            })
            .sum()
    }

    /// Number of nonzero entries.
    pub fn support(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        transpose_into(out.as_mut_slice(), &self.data, self.rows, self.cols);
        out
    }

    /// `self · b`.
    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows, "matmul: {}x{} · {}x{}", self.rows, self.cols, b.rows, b.cols);
        let mut out = Mat::zeros(self.rows, b.cols);
        gemm_nn(out.as_mut_slice(), false, &self.data, self.rows, self.cols, &b.data, b.cols);
        out
    }

    /// `self · bᵀ`.
    pub fn matmul_nt(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.cols, "matmul_nt: {}x{} · ({}x{})ᵀ", self.rows, self.cols, b.rows, b.cols);
        let mut out = Mat::zeros(self.rows, b.rows);
        gemm_nt(out.as_mut_slice(), false, &self.data, self.rows, self.cols, &b.data, b.rows);
        out
    }

    /// `selfᵀ · b`.
    pub fn matmul_tn(&self, b: &Mat) -> Mat {
        assert_eq!(self.rows, b.rows, "matmul_tn: ({}x{})ᵀ · {}x{}", self.rows, self.cols, b.rows, b.cols);
        let mut out = Mat::zeros(self.cols, b.cols);
        gemm_tn(out.as_mut_slice(), false, &self.data, self.rows, self.cols, &b.data, b.cols);
        out
    }

    /// `scale · self · selfᵀ` — the symmetric Gram matrix of the rows. Only
    /// the upper triangle is computed; the lower half is mirrored, so the
    /// result is exactly symmetric.
    pub fn gram(&self, scale: f64) -> Mat {
        let mut out = Mat::zeros(self.rows, self.rows);
        gram(out.as_mut_slice(), &self.data, self.rows, self.cols, scale);
        out
    }
}

impl core::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl core::ops::IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

// ---------------------------------------------------------------------------
// Kernel dispatch
// ---------------------------------------------------------------------------

/// Kernel flavor, detected once. `Portable` avoids `mul_add` (softfloat on
/// targets without hardware FMA); `Fma` requires AVX2+FMA and fuses the inner
/// loops.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Flavor {
    Portable,
    #[cfg_attr(not(all(feature = "std", target_arch = "x86_64")), allow(dead_code))]
    Fma,
}

#[cfg(all(feature = "std", target_arch = "x86_64"))]
fn flavor() -> Flavor {
    use core::sync::atomic::{AtomicU8, Ordering};
    static CACHED: AtomicU8 = AtomicU8::new(0);
    match CACHED.load(Ordering::Relaxed) {
        1 => Flavor::Portable,
        2 => Flavor::Fma,
        _ => {
            let f = if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
            {
                Flavor::Fma
            } else {
                Flavor::Portable
            };
            CACHED.store(if f == Flavor::Fma { 2 } else { 1 }, Ordering::Relaxed);
            f
        }
    }
}

#[cfg(not(all(feature = "std", target_arch = "x86_64")))]
fn flavor() -> Flavor {
    Flavor::Portable
}

/// Expands a kernel into portable and FMA-target variants plus a dispatching
/// front door. The body is written once, generic over `FMA`.
macro_rules! dispatch {
    ($front:ident, $body:ident, ($($arg:ident : $ty:ty),*)) => {
        #[cfg(all(feature = "std", target_arch = "x86_64"))]
        mod $body {
            #[target_feature(enable = "avx2,fma")]
            pub(super) unsafe fn fma($($arg: $ty),*) {
                super::$body::<true>($($arg),*)
            }
        }

        pub(crate) fn $front($($arg: $ty),*) {
            match flavor() {
                #[cfg(all(feature = "std", target_arch = "x86_64"))]
                Flavor::Fma => unsafe { $body::fma($($arg),*) },
                _ => $body::<false>($($arg),*),
            }
        }
    };
}

dispatch!(gemm_nn, kern_gemm_nn, (out: &mut [f64], add: bool, a: &[f64], m: usize, k: usize, b: &[f64], n: usize));
dispatch!(gemm_tn, kern_gemm_tn, (out: &mut [f64], add: bool, a: &[f64], m: usize, ka: usize, b: &[f64], n: usize));

/// The Gram and A·Bᵀ kernels carry most of the arithmetic, so their FMA
/// variants are written with explicit intrinsics (register-blocked micro
/// kernels) instead of trusting the autovectorizer.
pub(crate) fn gemm_nt(out: &mut [f64], add: bool, a: &[f64], m: usize, k: usize, b: &[f64], bn: usize) {
    match flavor() {
        #[cfg(all(feature = "std", target_arch = "x86_64"))]
        Flavor::Fma => unsafe { xfma::gemm_nt(out, add, a, m, k, b, bn) },
        _ => kern_gemm_nt(out, add, a, m, k, b, bn),
    }
}

pub(crate) fn gram(out: &mut [f64], u: &[f64], n: usize, k: usize, scale: f64) {
    match flavor() {
        #[cfg(all(feature = "std", target_arch = "x86_64"))]
        Flavor::Fma => unsafe { xfma::gram(out, u, n, k, scale) },
        _ => kern_gram(out, u, n, k, scale),
    }
    mirror_upper(out, n);
}

/// Row-wise stable softmax of `logits` into `out` (same shape).
///
/// Shared by the fused cross-entropy tape op and the standalone prediction
/// helper so both produce bit-identical probabilities.
pub(crate) fn softmax_rows_into(out: &mut Mat, logits: &Mat) {
    let (n, c) = logits.shape();
    debug_assert_eq!(out.shape(), (n, c));
    for i in 0..n {
        let row = logits.row(i);
        let mut mx = f64::NEG_INFINITY;
        for &x in row {
            if x > mx {
                mx = x;
            }
        }
        let prow = out.row_mut(i);
        let mut s = 0.0;
        for j in 0..c {
            let e = super::exp(row[j] - mx);
            prow[j] = e;
            s += e;
        }
        let inv = 1.0 / s;
        for p in prow {
            *p *= inv;
        }
    }
}

/// Dot product of two equal-length slices.
pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot_slices length mismatch");
    match flavor() {
        #[cfg(all(feature = "std", target_arch = "x86_64"))]
        Flavor::Fma => unsafe { xfma::dot(a, b) },
        _ => dot::<false>(a, b),
    }
}

// ---------------------------------------------------------------------------
// Kernel bodies
// ---------------------------------------------------------------------------

const LANES: usize = 8;

#[inline(always)]
fn fmadd<const FMA: bool>(a: f64, b: f64, c: f64) -> f64 {
    // `mul_add` is std-only; without `std` the FMA flavor is never selected,
    // so the plain form is the only one that can run.
    #[cfg(feature = "std")]
    if FMA {
        return a.mul_add(b, c);
    }
    a * b + c
}

/// `y += alpha · x`, lane-parallel.
#[inline(always)]
fn axpy<const FMA: bool>(y: &mut [f64], alpha: f64, x: &[f64]) {
    let n = y.len();
    let chunks = n / LANES * LANES;
    let (yh, yt) = y.split_at_mut(chunks);
    let (xh, xt) = x.split_at(chunks);
    for (yc, xc) in yh.chunks_exact_mut(LANES).zip(xh.chunks_exact(LANES)) {
        for l in 0..LANES {
            yc[l] = fmadd::<FMA>(alpha, xc[l], yc[l]);
        }
    }
    for (yv, xv) in yt.iter_mut().zip(xt) {
        *yv = fmadd::<FMA>(alpha, *xv, *yv);
    }
}

/// Fixed-order dot product with lane-parallel partial sums.
#[inline(always)]
fn dot<const FMA: bool>(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let chunks = n / LANES * LANES;
    let mut acc = [0.0f64; LANES];
    for (ac, bc) in a[..chunks].chunks_exact(LANES).zip(b[..chunks].chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] = fmadd::<FMA>(ac[l], bc[l], acc[l]);
        }
    }
    let mut tail = 0.0;
    for (av, bv) in a[chunks..].iter().zip(&b[chunks..]) {
        tail = fmadd::<FMA>(*av, *bv, tail);
    }
    let mut s = tail;
    for v in acc {
        s += v;
    }
    s
}

/// `out[m×n] (+)= a[m×k] · b[k×n]`, blocked over panels of `b` rows so the
/// streamed panel stays cache-resident. Zero entries of `a` are skipped.
#[inline(always)]
fn kern_gemm_nn<const FMA: bool>(
    out: &mut [f64],
    add: bool,
    a: &[f64],
    m: usize,
    k: usize,
    b: &[f64],
    n: usize,
) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    if !add {
        out.fill(0.0);
    }
    // Panel height chosen so a panel of b (KB·n·8 bytes) fits in L2 for the
    // shapes this crate produces (n ≤ a few hundred).
    const KB: usize = 384;
    let mut k0 = 0;
    while k0 < k {
        let k1 = (k0 + KB).min(k);
        for i in 0..m {
            let arow = &a[i * k..i * k + k];
            let orow = &mut out[i * n..i * n + n];
            for (kk, &aik) in arow[k0..k1].iter().enumerate() {
                if aik != 0.0 {
                    let brow = &b[(k0 + kk) * n..(k0 + kk) * n + n];
                    axpy::<FMA>(orow, aik, brow);
                }
            }
        }
        k0 = k1;
    }
}

/// `out[m×bn] (+)= a[m×k] · b[bn×k]ᵀ` — rows of `a` dotted with rows of `b`.
/// Portable fallback; the FMA build uses [`xfma::gemm_nt`].
fn kern_gemm_nt(out: &mut [f64], add: bool, a: &[f64], m: usize, k: usize, b: &[f64], bn: usize) {
    debug_assert_eq!(out.len(), m * bn);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), bn * k);
    for i in 0..m {
        let arow = &a[i * k..i * k + k];
        let orow = &mut out[i * bn..i * bn + bn];
        for j in 0..bn {
            let d = dot::<false>(arow, &b[j * k..j * k + k]);
            if add {
                orow[j] += d;
            } else {
                orow[j] = d;
            }
        }
    }
}

/// `out[ka×n] (+)= a[m×ka]ᵀ · b[m×n]`, accumulated row-by-row of the inputs
/// so `a` and `b` are streamed once. The output should be small enough to
/// stay cache-resident (true everywhere this is used: gradients of weight
/// matrices and of node embeddings). Zero entries of `a` are skipped.
#[inline(always)]
fn kern_gemm_tn<const FMA: bool>(
    out: &mut [f64],
    add: bool,
    a: &[f64],
    m: usize,
    ka: usize,
    b: &[f64],
    n: usize,
) {
    debug_assert_eq!(out.len(), ka * n);
    debug_assert_eq!(a.len(), m * ka);
    debug_assert_eq!(b.len(), m * n);
    if !add {
        out.fill(0.0);
    }
    for i in 0..m {
        let arow = &a[i * ka..i * ka + ka];
        let brow = &b[i * n..i * n + n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik != 0.0 {
                axpy::<FMA>(&mut out[kk * n..kk * n + n], aik, brow);
            }
        }
    }
}

/// Upper triangle of `scale · u uᵀ` for row-major `u[n×k]`. Portable
/// fallback; the FMA build uses [`xfma::gram`]. The front door mirrors the
/// triangle afterwards, so the result is exactly symmetric.
fn kern_gram(out: &mut [f64], u: &[f64], n: usize, k: usize, scale: f64) {
    debug_assert_eq!(out.len(), n * n);
    debug_assert_eq!(u.len(), n * k);
    const IB: usize = 16;
    let mut i0 = 0;
    while i0 < n {
        let i1 = (i0 + IB).min(n);
        for j in i0..n {
            let uj = &u[j * k..j * k + k];
            for i in i0..(j + 1).min(i1) {
                out[i * n + j] = dot::<false>(&u[i * k..i * k + k], uj) * scale;
            }
        }
        i0 = i1;
    }
}

/// Hand-vectorized AVX2+FMA kernels for the two arithmetic hot spots. These
/// functions are only compiled on x86-64 with `std` (runtime detection) and
/// produce the same values as the portable kernels up to FMA rounding.
#[cfg(all(feature = "std", target_arch = "x86_64"))]
mod xfma {
    use core::arch::x86_64::*;

    #[inline(always)]
    unsafe fn hsum(v: __m256d) -> f64 {
        unsafe {
            let lo = _mm256_castpd256_pd128(v);
            let hi = _mm256_extractf128_pd::<1>(v);
            let s = _mm_add_pd(lo, hi);
            let sh = _mm_unpackhi_pd(s, s);
            _mm_cvtsd_f64(_mm_add_sd(s, sh))
        }
    }

    /// Dot product with eight independent accumulator registers.
    #[inline(always)]
    unsafe fn dot8(a: *const f64, b: *const f64, k: usize) -> f64 {
        unsafe {
            let mut acc = [_mm256_setzero_pd(); 8];
            let mut i = 0usize;
            while i + 32 <= k {
                for q in 0..8 {
                    let av = _mm256_loadu_pd(a.add(i + 4 * q));
                    let bv = _mm256_loadu_pd(b.add(i + 4 * q));
                    acc[q] = _mm256_fmadd_pd(av, bv, acc[q]);
                }
                i += 32;
            }
            let mut qi = 0usize;
            while i + 4 <= k {
                let av = _mm256_loadu_pd(a.add(i));
                let bv = _mm256_loadu_pd(b.add(i));
                acc[qi & 7] = _mm256_fmadd_pd(av, bv, acc[qi & 7]);
                qi += 1;
                i += 4;
            }
            let mut tail = 0.0;
            while i < k {
                tail += *a.add(i) * *b.add(i);
                i += 1;
            }
            let s01 = _mm256_add_pd(acc[0], acc[1]);
            let s23 = _mm256_add_pd(acc[2], acc[3]);
            let s45 = _mm256_add_pd(acc[4], acc[5]);
            let s67 = _mm256_add_pd(acc[6], acc[7]);
            hsum(_mm256_add_pd(_mm256_add_pd(s01, s23), _mm256_add_pd(s45, s67))) + tail
        }
    }

    /// Four dot products sharing one `a` row: `out[q] = a · b_q`.
    #[inline(always)]
    unsafe fn dot1x4(a: *const f64, b: [*const f64; 4], k: usize) -> [f64; 4] {
        unsafe {
            let mut acc = [_mm256_setzero_pd(); 4];
            let mut i = 0usize;
            while i + 4 <= k {
                let av = _mm256_loadu_pd(a.add(i));
                for q in 0..4 {
                    acc[q] = _mm256_fmadd_pd(av, _mm256_loadu_pd(b[q].add(i)), acc[q]);
                }
                i += 4;
            }
            let mut out = [0.0f64; 4];
            for q in 0..4 {
                out[q] = hsum(acc[q]);
            }
            while i < k {
                let av = *a.add(i);
                for q in 0..4 {
                    out[q] += av * *b[q].add(i);
                }
                i += 1;
            }
            out
        }
    }

    /// Single dot product with the same accumulation order as one lane of
    /// [`dot1x4`]/[`dot2x4`], so a pair of rows produces bit-identical
    /// results no matter which Gram tile it lands in.
    #[inline(always)]
    unsafe fn dot1(a: *const f64, b: *const f64, k: usize) -> f64 {
        unsafe {
            let mut acc = _mm256_setzero_pd();
            let mut i = 0usize;
            while i + 4 <= k {
                let av = _mm256_loadu_pd(a.add(i));
                acc = _mm256_fmadd_pd(av, _mm256_loadu_pd(b.add(i)), acc);
                i += 4;
            }
            let mut out = hsum(acc);
            while i < k {
                out += *a.add(i) * *b.add(i);
                i += 1;
            }
            out
        }
    }

    /// Eight dot products at once: rows {a0, a1} × rows {b0..b3}. The shared
    /// loads raise arithmetic intensity enough to keep both FMA ports fed.
    #[inline(always)]
    unsafe fn dot2x4(a0: *const f64, a1: *const f64, b: [*const f64; 4], k: usize) -> [[f64; 4]; 2] {
        unsafe {
            let mut acc0 = [_mm256_setzero_pd(); 4];
            let mut acc1 = [_mm256_setzero_pd(); 4];
            let mut i = 0usize;
            while i + 4 <= k {
                let a0v = _mm256_loadu_pd(a0.add(i));
                let a1v = _mm256_loadu_pd(a1.add(i));
                for q in 0..4 {
                    let bv = _mm256_loadu_pd(b[q].add(i));
                    acc0[q] = _mm256_fmadd_pd(a0v, bv, acc0[q]);
                    acc1[q] = _mm256_fmadd_pd(a1v, bv, acc1[q]);
                }
                i += 4;
            }
            let mut out = [[0.0f64; 4]; 2];
            for q in 0..4 {
                out[0][q] = hsum(acc0[q]);
                out[1][q] = hsum(acc1[q]);
            }
            while i < k {
                let a0v = *a0.add(i);
                let a1v = *a1.add(i);
                for q in 0..4 {
                    let bv = *b[q].add(i);
                    out[0][q] += a0v * bv;
                    out[1][q] += a1v * bv;
                }
                i += 1;
            }
            out
        }
    }

    /// See [`super::dot_slices`]; same contract.
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn dot(a: &[f64], b: &[f64]) -> f64 {
        unsafe { dot8(a.as_ptr(), b.as_ptr(), a.len()) }
    }

    /// See [`super::kern_gemm_nt`]; same contract.
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn gemm_nt(
        out: &mut [f64],
        add: bool,
        a: &[f64],
        m: usize,
        k: usize,
        b: &[f64],
        bn: usize,
    ) {
        debug_assert_eq!(out.len(), m * bn);
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), bn * k);
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        let j4 = bn / 4 * 4;
        for i in 0..m {
            let arow = unsafe { ap.add(i * k) };
            let orow = &mut out[i * bn..i * bn + bn];
            let mut j = 0;
            while j < j4 {
                let d = unsafe {
                    dot1x4(
                        arow,
                        [bp.add(j * k), bp.add((j + 1) * k), bp.add((j + 2) * k), bp.add((j + 3) * k)],
                        k,
                    )
                };
                for q in 0..4 {
                    if add {
                        orow[j + q] += d[q];
                    } else {
                        orow[j + q] = d[q];
                    }
                }
                j += 4;
            }
            while j < bn {
                let d = unsafe { dot8(arow, bp.add(j * k), k) };
                if add {
                    orow[j] += d;
                } else {
                    orow[j] = d;
                }
                j += 1;
            }
        }
    }

    /// See [`super::kern_gram`]; upper triangle only (caller mirrors).
    /// Blocked over 16 `i` rows (kept in L2) with a 2×4 register micro
    /// kernel; tiles that straddle the diagonal simply compute a few extra
    /// below-diagonal entries, which are the correct symmetric values anyway.
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn gram(out: &mut [f64], u: &[f64], n: usize, k: usize, scale: f64) {
        debug_assert_eq!(out.len(), n * n);
        debug_assert_eq!(u.len(), n * k);
        const IB: usize = 16;
        let up = u.as_ptr();
        let sv = scale;
        let mut i0 = 0;
        while i0 < n {
            let i1 = (i0 + IB).min(n);
            let mut j = i0;
            while j + 4 <= n {
                let bj = unsafe {
                    [up.add(j * k), up.add((j + 1) * k), up.add((j + 2) * k), up.add((j + 3) * k)]
                };
                let mut i = i0;
                while i + 2 <= i1 && i <= j + 3 {
                    let d = unsafe { dot2x4(up.add(i * k), up.add((i + 1) * k), bj, k) };
                    for r in 0..2 {
                        for q in 0..4 {
                            if j + q >= i + r {
                                out[(i + r) * n + j + q] = d[r][q] * sv;
                            }
                        }
                    }
                    i += 2;
                }
                if i < i1 && i <= j + 3 {
                    let d = unsafe { dot1x4(up.add(i * k), bj, k) };
                    for q in 0..4 {
                        if j + q >= i {
                            out[i * n + j + q] = d[q] * sv;
                        }
                    }
                }
                j += 4;
            }
            while j < n {
                let uj = unsafe { up.add(j * k) };
                for i in i0..(j + 1).min(i1) {
                    out[i * n + j] = unsafe { dot1(up.add(i * k), uj, k) } * sv;
                }
                j += 1;
            }
            i0 = i1;
        }
    }
}

/// Copies the strict upper triangle onto the lower one, in 64×64 tiles.
fn mirror_upper(out: &mut [f64], n: usize) {
    const TB: usize = 64;
    let mut i0 = 0;
    while i0 < n {
        let i1 = (i0 + TB).min(n);
        let mut j0 = i0;
        while j0 < n {
            let j1 = (j0 + TB).min(n);
            for i in i0..i1 {
                for j in j0.max(i + 1)..j1 {
                    out[j * n + i] = out[i * n + j];
                }
            }
            j0 = j1;
        }
        i0 = i1;
    }
}

/// Blocked out-of-place transpose: `out[cols×rows] = a[rows×cols]ᵀ`.
pub(crate) fn transpose_into(out: &mut [f64], a: &[f64], rows: usize, cols: usize) {
    debug_assert_eq!(out.len(), rows * cols);
    const TB: usize = 64;
    let mut i0 = 0;
    while i0 < rows {
        let i1 = (i0 + TB).min(rows);
        let mut j0 = 0;
        while j0 < cols {
            let j1 = (j0 + TB).min(cols);
            for i in i0..i1 {
                for j in j0..j1 {
                    out[j * rows + i] = a[i * cols + j];
                }
            }
            j0 = j1;
        }
        i0 = i1;
    }
}
