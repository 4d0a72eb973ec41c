//! Dense symmetric linear algebra and seeded randomness.
//!
//! Two guarantees underpin the rest of the crate: Cholesky-based solves that
//! tolerate near-PSD kernel matrices via diagonal jitter escalation, and a
//! fixed, named PRNG so repeated runs are bit-identical across platforms.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Name of the PRNG behind [`SeededRng`]; recorded in run metadata.
pub const PRNG_ALGORITHM: &str = "chacha12";

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::ShapeMismatch("ragged row lengths".into()));
        }
        Ok(Self { rows: r, cols: c, data: rows.concat() })
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        Self { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self + s * I`; square matrices only.
    pub fn add_scaled_identity(&self, s: f64) -> Result<Self> {
        if self.rows != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "expected square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            out.data[i * self.cols + i] += s;
        }
        Ok(out)
    }

    fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }
}

/// `(A + A^T) / 2`. Errors on non-square input.
pub fn symmetrize(a: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != a.cols {
        return Err(Error::ShapeMismatch(format!(
            "cannot symmetrize {}x{} matrix",
            a.rows, a.cols
        )));
    }
    let n = a.rows;
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.data[i * n + j] = 0.5 * (a.data[i * n + j] + a.data[j * n + i]);
        }
    }
    Ok(out)
}

/// Relative symmetry tolerance accepted by [`cholesky_solve`].
const SYMMETRY_TOL: f64 = 1e-10;

/// Jitter escalation bounds, as multiples of `trace(A)/n`.
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Solve `A X = B` for symmetric positive-definite `A` via Cholesky.
///
/// Monte-Carlo kernel matrices are near-PSD but not exactly so; on
/// factorization failure a diagonal jitter of `1e-10 * trace(A)/n` is added
/// and escalated by factors of 10 up to `1e-4 * trace(A)/n` before giving up
/// with [`Error::NotPositiveDefinite`].
pub fn cholesky_solve(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != a.cols {
        return Err(Error::ShapeMismatch(format!(
            "coefficient matrix must be square, got {}x{}",
            a.rows, a.cols
        )));
    }
    if b.rows != a.rows {
        return Err(Error::ShapeMismatch(format!(
            "rhs has {} rows, expected {}",
            b.rows, a.rows
        )));
    }
    let scale = a.max_abs().max(1.0);
    let mut max_dev = 0.0_f64;
    for i in 0..a.rows {
        for j in (i + 1)..a.cols {
            max_dev = max_dev.max((a.get(i, j) - a.get(j, i)).abs());
        }
    }
    if max_dev > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric { max_dev });
    }

    let diag_scale = a.trace() / a.rows.max(1) as f64;
    let mut jitter = 0.0;
    loop {
        let attempt = if jitter == 0.0 { a.clone() } else { a.add_scaled_identity(jitter)? };
        if let Some(l) = cholesky_factor(&attempt) {
            return Ok(solve_with_factor(&l, b));
        }
        jitter = if jitter == 0.0 { JITTER_START * diag_scale } else { jitter * 10.0 };
        if jitter > JITTER_MAX * diag_scale || jitter == 0.0 || !jitter.is_finite() {
            return Err(Error::NotPositiveDefinite { max_jitter: jitter });
        }
    }
}

/// Threshold below which rayon overhead outweighs the column-level parallelism.
const PAR_CHOLESKY_MIN: usize = 192;

/// Lower-triangular Cholesky factor, or `None` if a pivot is non-positive.
fn cholesky_factor(a: &DenseMatrix) -> Option<DenseMatrix> {
    let n = a.rows;
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let d = a.get(j, j) - dot(&l.data[j * n..j * n + j], &l.data[j * n..j * n + j]);
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let ljj = d.sqrt();
        l.data[j * n + j] = ljj;
        if n - j - 1 >= PAR_CHOLESKY_MIN {
            // Entries of one column are independent; computing them from a
            // shared read-only view keeps the result bit-stable under any
            // thread count.
            let col: Vec<f64> = (j + 1..n)
                .into_par_iter()
                .map(|i| {
                    (a.get(i, j) - dot(&l.data[i * n..i * n + j], &l.data[j * n..j * n + j])) / ljj
                })
                .collect();
            for (k, v) in col.into_iter().enumerate() {
                l.data[(j + 1 + k) * n + j] = v;
            }
        } else {
            for i in j + 1..n {
                let v =
                    (a.get(i, j) - dot(&l.data[i * n..i * n + j], &l.data[j * n..j * n + j])) / ljj;
                l.data[i * n + j] = v;
            }
        }
    }
    Some(l)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn solve_with_factor(l: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let n = l.rows;
    let k = b.cols;
    let mut x = DenseMatrix::zeros(n, k);
    for c in 0..k {
        // Forward: L y = b.
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b.get(i, c);
            for j in 0..i {
                s -= l.data[i * n + j] * y[j];
            }
            y[i] = s / l.data[i * n + i];
        }
        // Backward: L^T x = y.
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s -= l.data[j * n + i] * x.data[j * k + c];
            }
            x.data[i * k + c] = s / l.data[i * n + i];
        }
    }
    x
}

/// Deterministic, platform-stable random stream (ChaCha12).
///
/// Single-owner by construction: parallel code never shares one stream but
/// derives independent children through [`child_seed`].
pub struct SeededRng {
    seed: u64,
    rng: ChaCha12Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: ChaCha12Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream for worker `index`; pure in `(seed, index)`.
    pub fn child(&self, index: u64) -> SeededRng {
        SeededRng::new(child_seed(self.seed, index))
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Child-seed derivation rule: one splitmix64 mixing round over
/// `parent + (index + 1) * golden_gamma`. Documented so that parallel workers
/// can be re-derived outside this crate.
pub fn child_seed(parent: u64, index: u64) -> u64 {
    const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut z = parent.wrapping_add(index.wrapping_add(1).wrapping_mul(GAMMA));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` i.i.d. vectors from an isotropic zero-mean Gaussian with per-coordinate
/// standard deviation `sigma`. `sigma = 0` yields exact zero vectors (the
/// stream is still consumed, so draw positions do not depend on `sigma`).
pub fn gaussian_draws(rng: &mut SeededRng, n: usize, dim: usize, sigma: f64) -> Vec<Vec<f64>> {
    assert!(sigma >= 0.0 && sigma.is_finite(), "mollifier sigma must be finite and >= 0");
    (0..n)
        .map(|_| (0..dim).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}
