//! Analytic Gaussian-mixture targets with exact density, score, and
//! component-posterior oracles.
//!
//! These play the role of the unknown ground truth: every estimator in the
//! crate can be checked against the closed forms here. Components are
//! isotropic, which keeps the oracles simple while still exhibiting the
//! behaviors of interest (multimodality, mode collapse).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

#[derive(Debug, Clone)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub stddev: f64,
}

/// Isotropic Gaussian mixture. Weights sum to 1 (within 1e-12) and all
/// standard deviations are strictly positive.
#[derive(Debug, Clone)]
pub struct GmmTarget {
    components: Vec<GmmComponent>,
}

impl GmmTarget {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidConfig("mixture needs at least one component".into()));
        }
        let dim = components[0].mean.len();
        if components.iter().any(|c| c.mean.len() != dim) {
            return Err(Error::ShapeMismatch("component means have mixed dimensions".into()));
        }
        if components.iter().any(|c| c.stddev <= 0.0 || !c.stddev.is_finite()) {
            return Err(Error::InvalidConfig("component stddev must be > 0".into()));
        }
        if components.iter().any(|c| c.weight <= 0.0 || !c.weight.is_finite()) {
            return Err(Error::InvalidConfig("component weights must be > 0".into()));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { components })
    }

    /// Standard 2-D Gaussian.
    pub fn gauss1() -> Self {
        Self::new(vec![GmmComponent { weight: 1.0, mean: vec![0.0, 0.0], stddev: 1.0 }]).unwrap()
    }

    /// Eight equal components on a circle of radius 2, stddev 0.02.
    pub fn ring8() -> Self {
        let comps = (0..8)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / 8.0;
                GmmComponent {
                    weight: 1.0 / 8.0,
                    mean: vec![2.0 * angle.cos(), 2.0 * angle.sin()],
                    stddev: 0.02,
                }
            })
            .collect();
        Self::new(comps).unwrap()
    }

    /// 5x5 grid centered at the origin, spacing 2, stddev 0.05.
    pub fn grid25() -> Self {
        let mut comps = Vec::with_capacity(25);
        for i in 0..5 {
            for j in 0..5 {
                comps.push(GmmComponent {
                    weight: 1.0 / 25.0,
                    mean: vec![2.0 * (i as f64 - 2.0), 2.0 * (j as f64 - 2.0)],
                    stddev: 0.05,
                });
            }
        }
        Self::new(comps).unwrap()
    }

    /// Built-in target by name: `gauss1`, `ring8`, or `grid25`.
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "gauss1" => Some(Self::gauss1()),
            "ring8" => Some(Self::ring8()),
            "grid25" => Some(Self::grid25()),
            _ => None,
        }
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn mode_centers(&self) -> Vec<Vec<f64>> {
        self.components.iter().map(|c| c.mean.clone()).collect()
    }

    pub fn max_stddev(&self) -> f64 {
        self.components.iter().fold(0.0_f64, |m, c| m.max(c.stddev))
    }

    /// `n` i.i.d. draws: component by weight, then an isotropic Gaussian draw.
    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = self.components.len() - 1;
                for (k, c) in self.components.iter().enumerate() {
                    acc += c.weight;
                    if u < acc {
                        chosen = k;
                        break;
                    }
                }
                let c = &self.components[chosen];
                c.mean
                    .iter()
                    .map(|&m| m + c.stddev * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }

    /// Per-component log densities `log w_k + log N(x; mu_k, s_k^2 I)`.
    fn component_log_terms(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len() as f64;
        self.components
            .iter()
            .map(|c| {
                let sq: f64 = x.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
                c.weight.ln()
                    - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
                    - d * c.stddev.ln()
                    - sq / (2.0 * c.stddev * c.stddev)
            })
            .collect()
    }

    /// Log mixture density via log-sum-exp.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.component_log_terms(x))
    }

    /// Exact gradient of [`Self::log_density`]: the responsibility-weighted
    /// sum of per-component scores `-(x - mu_k) / s_k^2`.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let resp = self.component_posterior(x);
        let mut g = vec![0.0; x.len()];
        for (r, c) in resp.iter().zip(&self.components) {
            let inv_var = 1.0 / (c.stddev * c.stddev);
            for (gi, (xi, mi)) in g.iter_mut().zip(x.iter().zip(&c.mean)) {
                *gi += r * (mi - xi) * inv_var;
            }
        }
        g
    }

    /// Posterior component responsibilities; entries sum to 1.
    pub fn component_posterior(&self, x: &[f64]) -> Vec<f64> {
        let terms = self.component_log_terms(x);
        let lse = log_sum_exp(&terms);
        terms.iter().map(|t| (t - lse).exp()).collect()
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}
