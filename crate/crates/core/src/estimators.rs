//! Log-density and score estimators: ridge-preconditioned kernel weights and
//! the uniform-weight KDE baseline.
//!
//! Both estimators share one functional form,
//!
//! ```text
//! log f(x) ~= log sum_i w_i k_psi(x, x_i)
//! ```
//!
//! over a basis of samples. KDE uses uniform weights `w = 1` (unnormalized —
//! only gradients of the log enter the flow, so normalization is irrelevant).
//! The ridge variant solves `(K + ridge I) w = 1` on the mollified kernel
//! matrix, which collapses the double-sum form `sum_ij H_ji k_psi(x, x_i)` to
//! per-basis weights; as the ridge grows the weights flatten to `1/ridge` and
//! the estimator becomes KDE up to an irrelevant scale.
//!
//! Negative weights can occur and are used as-is; the log argument is floored
//! at 1e-300 and every clamp is counted as a diagnostic rather than an error.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{
    kernel_from_features, kernel_matrix_from_features, mollified_basis_features, KernelSpec,
};
use crate::numerics::{cholesky_solve, DenseMatrix, SeededRng};
use crate::targets::GmmTarget;

/// Floor on the kernel sum inside the log.
pub const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorMode {
    Krr,
    Kde,
}

impl EstimatorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorMode::Krr => "krr",
            EstimatorMode::Kde => "kde",
        }
    }
}

/// A fitted log-density estimate over a basis of samples.
///
/// Immutable after fitting; evaluation may run concurrently (the clamp
/// counter is atomic).
pub struct DensityEstimate {
    basis: Vec<Vec<f64>>,
    weights: Vec<f64>,
    kernel: KernelSpec,
    eps: Vec<Vec<f64>>,
    ridge: f64,
    mode: EstimatorMode,
    /// Cached feature vectors of `basis[i] - eps_e`, reused by every query.
    basis_feats: Vec<Vec<Vec<f64>>>,
    clamp_events: AtomicU64,
}

impl std::fmt::Debug for DensityEstimate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DensityEstimate")
            .field("n", &self.basis.len())
            .field("mode", &self.mode)
            .field("ridge", &self.ridge)
            .field("clamp_events", &self.clamp_events())
            .finish()
    }
}

fn check_fit_inputs(basis: &[Vec<f64>], spec: &KernelSpec) -> Result<()> {
    if basis.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let dim = basis[0].len();
    if basis.iter().any(|b| b.len() != dim) {
        return Err(Error::ShapeMismatch("basis points have mixed dimensions".into()));
    }
    spec.validate()
}

/// Fit ridge-preconditioned weights: draw the shared mollifier set, build the
/// symmetrized kernel matrix, and solve `(K + ridge I) w = 1`.
///
/// A `NotPositiveDefinite` error signals that the ridge is too small for the
/// sampled kernel matrix.
pub fn fit_krr(
    basis: &[Vec<f64>],
    spec: &KernelSpec,
    ridge: f64,
    rng: &mut SeededRng,
) -> Result<DensityEstimate> {
    check_fit_inputs(basis, spec)?;
    if ridge <= 0.0 || !ridge.is_finite() {
        return Err(Error::InvalidConfig("ridge must be finite and > 0".into()));
    }
    let eps = spec.draw_eps(rng, basis[0].len());
    let basis_feats = mollified_basis_features(spec, basis, &eps);
    let k = kernel_matrix_from_features(spec, basis, &basis_feats)?;
    let a = k.add_scaled_identity(ridge)?;
    let ones = DenseMatrix::column(&vec![1.0; basis.len()]);
    let w = cholesky_solve(&a, &ones)?;
    Ok(DensityEstimate {
        basis: basis.to_vec(),
        weights: w.data().to_vec(),
        kernel: spec.clone(),
        eps,
        ridge,
        mode: EstimatorMode::Krr,
        basis_feats,
        clamp_events: AtomicU64::new(0),
    })
}

/// Fit the KDE baseline: uniform unit weights over the basis.
pub fn fit_kde(basis: &[Vec<f64>], spec: &KernelSpec, rng: &mut SeededRng) -> Result<DensityEstimate> {
    check_fit_inputs(basis, spec)?;
    let eps = spec.draw_eps(rng, basis[0].len());
    let basis_feats = mollified_basis_features(spec, basis, &eps);
    Ok(DensityEstimate {
        basis: basis.to_vec(),
        weights: vec![1.0; basis.len()],
        kernel: spec.clone(),
        eps,
        ridge: 1.0,
        mode: EstimatorMode::Kde,
        basis_feats,
        clamp_events: AtomicU64::new(0),
    })
}

impl DensityEstimate {
    pub fn mode(&self) -> EstimatorMode {
        self.mode
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    pub fn eps(&self) -> &[Vec<f64>] {
        &self.eps
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Number of queries where the log floor bound.
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events.load(Ordering::Relaxed)
    }

    /// Weighted kernel sum at the query plus the feature-space cotangent of
    /// that sum, for the gradient path.
    fn weighted_sum_and_cotangent(&self, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let fx = self.kernel.extractor.features(x);
        let h = self.kernel.bandwidth;
        let mut total = 0.0;
        let mut cot = vec![0.0; fx.len()];
        for (feats, &w) in self.basis_feats.iter().zip(&self.weights) {
            let m = feats.len() as f64;
            for fb in feats {
                let mut sq = 0.0;
                for (a, b) in fx.iter().zip(fb) {
                    sq += (a - b) * (a - b);
                }
                let k = (-sq / h).exp() / m;
                for ((c, a), b) in cot.iter_mut().zip(&fx).zip(fb) {
                    *c += w * (-2.0 / h) * (a - b) * k;
                }
            }
        }
        for (feats, &w) in self.basis_feats.iter().zip(&self.weights) {
            total += w * kernel_from_features(&self.kernel, &fx, feats);
        }
        (total, cot, fx)
    }

    /// `log(max(sum_i w_i k_psi(x, x_i), 1e-300))`; the clamp counter ticks
    /// whenever the floor binds (including negative sums).
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let fx = self.kernel.extractor.features(x);
        let mut total = 0.0;
        for (feats, &w) in self.basis_feats.iter().zip(&self.weights) {
            total += w * kernel_from_features(&self.kernel, &fx, feats);
        }
        if total < LOG_FLOOR {
            self.clamp_events.fetch_add(1, Ordering::Relaxed);
            LOG_FLOOR.ln()
        } else {
            total.ln()
        }
    }

    /// Score of the estimated log density. In the clamped region the gradient
    /// is taken as zero (and counted).
    pub fn grad_log_density(&self, x: &[f64]) -> Vec<f64> {
        let (total, cot, _) = self.weighted_sum_and_cotangent(x);
        if total < LOG_FLOOR {
            self.clamp_events.fetch_add(1, Ordering::Relaxed);
            return vec![0.0; x.len()];
        }
        let pulled = self.kernel.extractor.feature_vjp(x, &cot);
        pulled.into_iter().map(|v| v / total).collect()
    }
}

/// A log density with a computable score: fitted estimates and analytic
/// oracles alike. The flow engine consumes the target-density term through
/// this interface, which is what lets tests inject an exact score.
pub trait ScoreField: Sync {
    fn log_density(&self, x: &[f64]) -> f64;
    fn grad_log_density(&self, x: &[f64]) -> Vec<f64>;
    /// Clamp diagnostics, for estimators that track them.
    fn clamp_events(&self) -> u64 {
        0
    }
}

impl ScoreField for DensityEstimate {
    fn log_density(&self, x: &[f64]) -> f64 {
        DensityEstimate::log_density(self, x)
    }

    fn grad_log_density(&self, x: &[f64]) -> Vec<f64> {
        DensityEstimate::grad_log_density(self, x)
    }

    fn clamp_events(&self) -> u64 {
        DensityEstimate::clamp_events(self)
    }
}

impl ScoreField for GmmTarget {
    fn log_density(&self, x: &[f64]) -> f64 {
        GmmTarget::log_density(self, x)
    }

    fn grad_log_density(&self, x: &[f64]) -> Vec<f64> {
        self.score(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{mollified_kernel, FeatureExtractor, MollifierSpec};
    use crate::numerics::gaussian_draws;
    use rand::Rng;

    fn identity_spec(h: f64, sigma: f64, m: usize) -> KernelSpec {
        KernelSpec::new(FeatureExtractor::Identity, h, MollifierSpec::new(sigma, m))
    }

    #[test]
    fn krr_scalar_solve() {
        // n = 1, sigma = 0: K = [1], so (1 + ridge) w = 1.
        let spec = identity_spec(1.0, 0.0, 1);
        let est = fit_krr(&[vec![0.0, 0.0]], &spec, 1.0, &mut SeededRng::new(0)).unwrap();
        assert!((est.weights()[0] - 0.5).abs() < 1e-12);
        // log density at the basis point: log(0.5 * 1).
        assert!((est.log_density(&[0.0, 0.0]) - 0.5_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn krr_large_ridge_weights_near_uniform() {
        let mut rng = SeededRng::new(7);
        let basis: Vec<Vec<f64>> = (0..16)
            .map(|_| vec![rng.random::<f64>() * 2.0, rng.random::<f64>() * 2.0])
            .collect();
        let spec = identity_spec(1.0, 0.0, 1);
        let est = fit_krr(&basis, &spec, 1000.0, &mut rng).unwrap();
        for w in est.weights() {
            assert!((w - 1e-3).abs() / 1e-3 < 0.02, "weight {w}");
        }
    }

    #[test]
    fn krr_weights_match_dense_inverse_oracle() {
        let mut rng = SeededRng::new(13);
        let basis: Vec<Vec<f64>> =
            (0..8).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let spec = identity_spec(0.8, 0.1, 8);
        let est = fit_krr(&basis, &spec, 0.5, &mut SeededRng::new(99)).unwrap();

        // Rebuild (K + ridge I) with the same eps and invert by Gauss-Jordan.
        let k = crate::kernels::kernel_matrix(&spec, &basis, est.eps()).unwrap();
        let n = 8;
        let mut aug = vec![vec![0.0; 2 * n]; n];
        for i in 0..n {
            for j in 0..n {
                aug[i][j] = k.get(i, j) + if i == j { 0.5 } else { 0.0 };
            }
            aug[i][n + i] = 1.0;
        }
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&a, &b| aug[a][col].abs().partial_cmp(&aug[b][col].abs()).unwrap())
                .unwrap();
            aug.swap(col, pivot);
            let p = aug[col][col];
            for v in aug[col].iter_mut() {
                *v /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = aug[r][col];
                    for c in 0..2 * n {
                        aug[r][c] -= f * aug[col][c];
                    }
                }
            }
        }
        for (i, &w) in est.weights().iter().enumerate() {
            let expected: f64 = (0..n).map(|j| aug[i][n + j]).sum();
            assert!((w - expected).abs() < 1e-8, "w[{i}] {w} vs {expected}");
        }
    }

    #[test]
    fn kde_weights_are_unit() {
        let basis = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.0]];
        let est = fit_kde(&basis, &identity_spec(1.0, 0.0, 1), &mut SeededRng::new(0)).unwrap();
        assert_eq!(est.weights(), &[1.0, 1.0, 1.0]);
        assert_eq!(est.mode(), EstimatorMode::Kde);
    }

    #[test]
    fn kde_score_on_gaussian_points_toward_origin() {
        let mut rng = SeededRng::new(3);
        let samples = gaussian_draws(&mut rng, 4096, 2, 1.0);
        let h = crate::kernels::median_sq_feature_distance(&FeatureExtractor::Identity, &samples);
        let spec = identity_spec(h, 0.0, 1);
        let est = fit_kde(&samples, &spec, &mut rng).unwrap();

        let mut cosines = Vec::new();
        let mut inward = 0;
        let probes = gaussian_draws(&mut rng, 20, 2, 1.0);
        for p in &probes {
            let g = est.grad_log_density(p);
            let analytic = [-p[0], -p[1]];
            let dot = g[0] * analytic[0] + g[1] * analytic[1];
            let ng = (g[0] * g[0] + g[1] * g[1]).sqrt();
            let na = (analytic[0] * analytic[0] + analytic[1] * analytic[1]).sqrt();
            cosines.push(dot / (ng * na).max(1e-12));
            let xdot = g[0] * p[0] + g[1] * p[1];
            if xdot < 0.0 {
                inward += 1;
            }
        }
        cosines.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(cosines[cosines.len() / 2] >= 0.9, "median cosine {}", cosines[10]);
        assert!(inward >= 18, "inward {inward}/20");
    }

    #[test]
    fn krr_converges_to_kde_in_large_ridge_limit() {
        let mut rng = SeededRng::new(5);
        let basis = gaussian_draws(&mut rng, 64, 2, 1.0);
        let spec = identity_spec(1.0, 0.0, 1);
        let krr = fit_krr(&basis, &spec, 1000.0, &mut SeededRng::new(1)).unwrap();
        let kde = fit_kde(&basis, &spec, &mut SeededRng::new(1)).unwrap();
        let probes = gaussian_draws(&mut rng, 20, 2, 1.0);
        for p in &probes {
            let gk = krr.grad_log_density(p);
            let gd = kde.grad_log_density(p);
            for (a, b) in gk.iter().zip(&gd) {
                assert!((a - b).abs() < 1e-2, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn weight_deviation_monotone_in_ridge() {
        let mut rng = SeededRng::new(17);
        let basis = gaussian_draws(&mut rng, 24, 2, 1.0);
        let spec = identity_spec(1.0, 0.0, 1);
        let mut last = f64::INFINITY;
        for eta in [1.0, 10.0, 100.0, 1000.0] {
            let est = fit_krr(&basis, &spec, eta, &mut SeededRng::new(2)).unwrap();
            let dev: f64 = est
                .weights()
                .iter()
                .map(|w| (w - 1.0 / eta) * (w - 1.0 / eta))
                .sum::<f64>()
                .sqrt();
            assert!(dev <= last, "deviation increased at eta {eta}");
            last = dev;
        }
    }

    #[test]
    fn log_density_self_kernel_dominates() {
        // Well-separated basis: at a basis point, log density ~ log(1).
        let basis = vec![vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 10.0]];
        let est = fit_kde(&basis, &identity_spec(0.5, 0.0, 1), &mut SeededRng::new(0)).unwrap();
        let v = est.log_density(&[0.0, 0.0]);
        assert!(v.abs() < 1e-10, "log density {v}");
    }

    #[test]
    fn clamped_query_counts_event() {
        // Near-duplicate points keep (K + I)^-1 1 positive but tiny, and a
        // far-away query underflows the kernel sum.
        let basis = vec![vec![0.0, 0.0], vec![1e-9, 0.0]];
        let spec = identity_spec(0.01, 0.0, 1);
        let est = fit_krr(&basis, &spec, 1.0, &mut SeededRng::new(0)).unwrap();
        assert!(est.weights().iter().all(|w| *w > 0.0));
        let v = est.log_density(&[1000.0, 0.0]);
        assert_eq!(v, LOG_FLOOR.ln());
        assert_eq!(est.clamp_events(), 1);
        let g = est.grad_log_density(&[1000.0, 0.0]);
        assert_eq!(g, vec![0.0, 0.0]);
        assert_eq!(est.clamp_events(), 2);
    }

    #[test]
    fn grad_zero_at_single_basis_point() {
        let est = fit_krr(
            &[vec![0.3, -0.3]],
            &identity_spec(1.0, 0.0, 1),
            1.0,
            &mut SeededRng::new(0),
        )
        .unwrap();
        assert_eq!(est.grad_log_density(&[0.3, -0.3]), vec![0.0, 0.0]);
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = SeededRng::new(23);
        let basis = gaussian_draws(&mut rng, 12, 2, 1.0);
        let spec = identity_spec(0.7, 0.15, 8);
        let est = fit_krr(&basis, &spec, 0.8, &mut rng).unwrap();
        let h = 1e-5;
        for _ in 0..10 {
            let x = [rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0];
            let g = est.grad_log_density(&x);
            for c in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[c] += h;
                xm[c] -= h;
                let fd = (est.log_density(&xp) - est.log_density(&xm)) / (2.0 * h);
                assert!((g[c] - fd).abs() / fd.abs().max(1e-6) < 1e-4, "{} vs {fd}", g[c]);
            }
        }
    }

    #[test]
    fn log_density_consistent_with_pairwise_kernel_op() {
        // The cached-feature path must agree bit-for-bit with summing the
        // public mollified_kernel over the basis.
        let mut rng = SeededRng::new(29);
        let basis = gaussian_draws(&mut rng, 6, 2, 1.0);
        let spec = identity_spec(0.9, 0.2, 8);
        let est = fit_kde(&basis, &spec, &mut rng).unwrap();
        let x = [0.4, -0.1];
        let direct: f64 = basis
            .iter()
            .map(|b| mollified_kernel(&spec, &x, b, est.eps()).unwrap())
            .sum();
        assert_eq!(est.log_density(&x), direct.ln());
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = SeededRng::new(31);
        let basis = gaussian_draws(&mut rng, 10, 2, 1.0);
        let spec = identity_spec(1.0, 0.1, 4);
        let est = fit_krr(&basis, &spec, 1.0, &mut SeededRng::new(7)).unwrap();

        let rev: Vec<Vec<f64>> = basis.iter().rev().cloned().collect();
        let est_rev = fit_krr(&rev, &spec, 1.0, &mut SeededRng::new(7)).unwrap();
        for (i, w) in est.weights().iter().enumerate() {
            let wr = est_rev.weights()[9 - i];
            assert!((w - wr).abs() < 1e-10, "{w} vs {wr}");
        }
        let x = [0.2, 0.6];
        assert!((est.log_density(&x) - est_rev.log_density(&x)).abs() < 1e-10);
    }

    #[test]
    fn score_error_shrinks_with_sample_size() {
        // Mean L2 error against the analytic Gaussian score, n doubling over
        // nested prefixes of one pinned sample stream.
        let probe_rng = &mut SeededRng::new(41);
        let probes = gaussian_draws(probe_rng, 20, 2, 1.0);
        let pool = gaussian_draws(&mut SeededRng::new(1009), 2048, 2, 1.0);
        let mut errs = Vec::new();
        for n in [256usize, 512, 1024, 2048] {
            let samples = &pool[..n];
            let h =
                crate::kernels::median_sq_feature_distance(&FeatureExtractor::Identity, samples);
            let est =
                fit_kde(samples, &identity_spec(h, 0.0, 1), &mut SeededRng::new(7)).unwrap();
            let mean_err: f64 = probes
                .iter()
                .map(|p| {
                    let g = est.grad_log_density(p);
                    ((g[0] + p[0]).powi(2) + (g[1] + p[1]).powi(2)).sqrt()
                })
                .sum::<f64>()
                / probes.len() as f64;
            errs.push(mean_err);
        }
        for w in errs.windows(2) {
            assert!(w[1] <= w[0], "errors not monotone: {errs:?}");
        }
    }
}
