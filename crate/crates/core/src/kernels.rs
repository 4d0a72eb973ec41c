//! Feature-space Gaussian kernels, their mollified versions, and kernel-matrix
//! assembly.
//!
//! The base kernel is `k(x, y) = exp(-||d(x) - d(y)||^2 / h)` for a feature
//! extractor `d` (identity, or a hidden layer of an MLP) and bandwidth `h`.
//! The mollified kernel convolves the second argument with an isotropic
//! Gaussian of standard deviation `sigma`, approximated by a Monte-Carlo
//! average over `m` shared draws:
//!
//! ```text
//! k_psi(x, y) ~= (1/m) * sum_e k(x, y - eps_e),   eps_e ~ N(0, sigma^2 I)
//! ```
//!
//! One epsilon set is shared across every pair of a matrix build, which keeps
//! the estimator a fixed deterministic function during differentiation and
//! keeps the Monte-Carlo matrix nearly symmetric; [`symmetrize`] removes the
//! residual asymmetry. At `sigma = 0` every path collapses to the base kernel
//! exactly.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nets::MlpNet;
use crate::numerics::{gaussian_draws, symmetrize, DenseMatrix, SeededRng};

/// Feature map `d(.)` inside the kernel.
#[derive(Clone)]
pub enum FeatureExtractor {
    /// Data space itself.
    Identity,
    /// Activations of the first `layers` layers of a network; `layers = 2` on
    /// a three-layer net yields its last hidden layer.
    MlpHidden { net: Arc<MlpNet>, layers: usize },
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureExtractor::Identity => write!(f, "Identity"),
            FeatureExtractor::MlpHidden { layers, .. } => {
                write!(f, "MlpHidden {{ layers: {layers} }}")
            }
        }
    }
}

impl FeatureExtractor {
    pub fn mlp_hidden(net: Arc<MlpNet>, layers: usize) -> Result<Self> {
        if layers == 0 || layers > net.num_layers() {
            return Err(Error::InvalidConfig(format!(
                "feature layer index {layers} outside 1..={}",
                net.num_layers()
            )));
        }
        Ok(FeatureExtractor::MlpHidden { net, layers })
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        match self {
            FeatureExtractor::Identity => x.to_vec(),
            FeatureExtractor::MlpHidden { net, layers } => net
                .forward_prefix(x, *layers)
                .expect("input dimension matches feature extractor"),
        }
    }

    /// Pullback of a feature-space cotangent to data space.
    pub fn feature_vjp(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match self {
            FeatureExtractor::Identity => u.to_vec(),
            FeatureExtractor::MlpHidden { net, layers } => net
                .vjp_prefix(x, u, *layers)
                .expect("cotangent dimension matches feature extractor"),
        }
    }
}

/// Mollifier: isotropic Gaussian with standard deviation `sigma`, approximated
/// by `m` Monte-Carlo draws. The optional anneal linearly lowers `sigma`
/// toward `sigma_final` over the flow steps.
#[derive(Debug, Clone)]
pub struct MollifierSpec {
    pub sigma: f64,
    pub m: usize,
    pub anneal: Option<AnnealSpec>,
}

#[derive(Debug, Clone)]
pub struct AnnealSpec {
    pub sigma_final: f64,
}

impl MollifierSpec {
    pub fn new(sigma: f64, m: usize) -> Self {
        Self { sigma, m, anneal: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return Err(Error::InvalidConfig("mollifier sigma must be finite and >= 0".into()));
        }
        if self.m == 0 {
            return Err(Error::InvalidConfig("mollifier sample count must be >= 1".into()));
        }
        if let Some(a) = &self.anneal {
            if a.sigma_final > self.sigma || a.sigma_final < 0.0 {
                return Err(Error::InvalidConfig(
                    "anneal sigma_final must lie in [0, sigma]".into(),
                ));
            }
        }
        Ok(())
    }

    /// Linearly annealed sigma for step `t` of `total` (the final step
    /// reaches `sigma_final` exactly). Without an anneal, constant.
    pub fn sigma_at(&self, t: usize, total: usize) -> f64 {
        match &self.anneal {
            None => self.sigma,
            Some(a) => {
                let denom = total.saturating_sub(1).max(1) as f64;
                self.sigma + (a.sigma_final - self.sigma) * (t as f64 / denom).min(1.0)
            }
        }
    }
}

/// Kernel definition: feature extractor, bandwidth (divides the squared
/// feature distance), and mollifier.
#[derive(Debug, Clone)]
pub struct KernelSpec {
    pub extractor: FeatureExtractor,
    pub bandwidth: f64,
    pub mollifier: MollifierSpec,
}

impl KernelSpec {
    pub fn new(extractor: FeatureExtractor, bandwidth: f64, mollifier: MollifierSpec) -> Self {
        Self { extractor, bandwidth, mollifier }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidth <= 0.0 || !self.bandwidth.is_finite() {
            return Err(Error::InvalidConfig("kernel bandwidth must be finite and > 0".into()));
        }
        self.mollifier.validate()
    }

    /// Draw the shared mollifier set for points of dimension `dim`.
    pub fn draw_eps(&self, rng: &mut SeededRng, dim: usize) -> Vec<Vec<f64>> {
        gaussian_draws(rng, self.mollifier.m, dim, self.mollifier.sigma)
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Base kernel `exp(-||d(x) - d(y)||^2 / h)`, always in `(0, 1]`.
pub fn base_kernel(spec: &KernelSpec, x: &[f64], y: &[f64]) -> f64 {
    let fx = spec.extractor.features(x);
    let fy = spec.extractor.features(y);
    (-sq_dist(&fx, &fy) / spec.bandwidth).exp()
}

fn check_eps(eps: &[Vec<f64>], dim: usize) -> Result<()> {
    if eps.is_empty() {
        return Err(Error::ShapeMismatch("empty mollifier draw set".into()));
    }
    if eps.iter().any(|e| e.len() != dim) {
        return Err(Error::ShapeMismatch(format!(
            "mollifier draws must have data dimension {dim}"
        )));
    }
    Ok(())
}

/// Monte-Carlo mollified kernel `(1/m) sum_e k(x, y - eps_e)` over the shared
/// draw set. A zero-sigma mollifier evaluates the base kernel directly, so
/// the equality `k_psi = k` is exact rather than up to summation rounding.
pub fn mollified_kernel(spec: &KernelSpec, x: &[f64], y: &[f64], eps: &[Vec<f64>]) -> Result<f64> {
    if spec.mollifier.sigma == 0.0 {
        return Ok(base_kernel(spec, x, y));
    }
    check_eps(eps, y.len())?;
    let fx = spec.extractor.features(x);
    let mut total = 0.0;
    let mut shifted = vec![0.0; y.len()];
    for e in eps {
        for ((s, yv), ev) in shifted.iter_mut().zip(y).zip(e) {
            *s = yv - ev;
        }
        let fy = spec.extractor.features(&shifted);
        total += (-sq_dist(&fx, &fy) / spec.bandwidth).exp();
    }
    Ok(total / eps.len() as f64)
}

/// Analytic gradients of [`mollified_kernel`] with respect to both arguments,
/// differentiating through the feature extractor.
pub fn mollified_kernel_grad(
    spec: &KernelSpec,
    x: &[f64],
    y: &[f64],
    eps: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = spec.bandwidth;
    let fx = spec.extractor.features(x);

    if spec.mollifier.sigma == 0.0 {
        let fy = spec.extractor.features(y);
        let k = (-sq_dist(&fx, &fy) / h).exp();
        let ux: Vec<f64> =
            fx.iter().zip(&fy).map(|(a, b)| -2.0 / h * (a - b) * k).collect();
        let uy: Vec<f64> = ux.iter().map(|v| -v).collect();
        let gx = spec.extractor.feature_vjp(x, &ux);
        let gy = spec.extractor.feature_vjp(y, &uy);
        return Ok((gx, gy));
    }

    check_eps(eps, y.len())?;
    let m = eps.len() as f64;
    let mut ux = vec![0.0; fx.len()];
    let mut gy = vec![0.0; y.len()];
    let mut shifted = vec![0.0; y.len()];
    for e in eps {
        for ((s, yv), ev) in shifted.iter_mut().zip(y).zip(e) {
            *s = yv - ev;
        }
        let fy = spec.extractor.features(&shifted);
        let k = (-sq_dist(&fx, &fy) / h).exp();
        // Cotangent on d(x) accumulates across draws; the y-side needs a
        // pullback per draw because each term is evaluated at y - eps_e.
        let uy: Vec<f64> = fx
            .iter()
            .zip(&fy)
            .map(|(a, b)| 2.0 / h * (a - b) * k / m)
            .collect();
        for (u, uyv) in ux.iter_mut().zip(&uy) {
            *u -= uyv;
        }
        let gy_e = spec.extractor.feature_vjp(&shifted, &uy);
        for (g, v) in gy.iter_mut().zip(gy_e) {
            *g += v;
        }
    }
    let gx = spec.extractor.feature_vjp(x, &ux);
    Ok((gx, gy))
}

/// Feature vectors of `points[i] - eps_e`, flattened per point. With a zero
/// mollifier this is the single unshifted feature vector per point.
pub(crate) fn mollified_basis_features(
    spec: &KernelSpec,
    points: &[Vec<f64>],
    eps: &[Vec<f64>],
) -> Vec<Vec<Vec<f64>>> {
    if spec.mollifier.sigma == 0.0 {
        return points
            .par_iter()
            .map(|p| vec![spec.extractor.features(p)])
            .collect();
    }
    points
        .par_iter()
        .map(|p| {
            eps.iter()
                .map(|e| {
                    let shifted: Vec<f64> = p.iter().zip(e).map(|(pv, ev)| pv - ev).collect();
                    spec.extractor.features(&shifted)
                })
                .collect()
        })
        .collect()
}

/// Mollified kernel of a query feature vector against cached basis features,
/// matching [`mollified_kernel`] bit for bit.
#[inline]
pub(crate) fn kernel_from_features(spec: &KernelSpec, fx: &[f64], basis: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for fb in basis {
        total += (-sq_dist(fx, fb) / spec.bandwidth).exp();
    }
    if basis.len() == 1 {
        total
    } else {
        total / basis.len() as f64
    }
}

/// Kernel matrix over `points` with one shared `eps` set for all pairs.
///
/// The diagonal uses the same estimator as off-diagonal entries (no
/// special-casing), and the raw Monte-Carlo matrix is symmetrized.
pub fn kernel_matrix(spec: &KernelSpec, points: &[Vec<f64>], eps: &[Vec<f64>]) -> Result<DenseMatrix> {
    if points.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    spec.validate()?;
    if spec.mollifier.sigma > 0.0 {
        check_eps(eps, points[0].len())?;
    }
    let shifted = mollified_basis_features(spec, points, eps);
    kernel_matrix_from_features(spec, points, &shifted)
}

pub(crate) fn kernel_matrix_from_features(
    spec: &KernelSpec,
    points: &[Vec<f64>],
    shifted: &[Vec<Vec<f64>>],
) -> Result<DenseMatrix> {
    let n = points.len();
    let feats: Vec<Vec<f64>> =
        points.par_iter().map(|p| spec.extractor.features(p)).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| kernel_from_features(spec, &feats[i], &shifted[j])).collect())
        .collect();
    symmetrize(&DenseMatrix::from_rows(&rows)?)
}

/// Median of squared pairwise feature distances, the default bandwidth.
/// Falls back to 1 on degenerate point sets.
pub fn median_sq_feature_distance(extractor: &FeatureExtractor, points: &[Vec<f64>]) -> f64 {
    if points.len() < 2 {
        return 1.0;
    }
    let feats: Vec<Vec<f64>> = points.iter().map(|p| extractor.features(p)).collect();
    let mut dists = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    for i in 0..feats.len() {
        for j in (i + 1)..feats.len() {
            dists.push(sq_dist(&feats[i], &feats[j]));
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = dists[dists.len() / 2];
    if med > 0.0 && med.is_finite() {
        med
    } else {
        1.0
    }
}
