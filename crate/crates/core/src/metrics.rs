//! Distribution-distance and mode-recovery metrics.
//!
//! Toy-scale stand-ins for the usual image metrics: squared MMD with a
//! Gaussian kernel (unbiased U-statistic), energy distance (biased
//! V-statistic), and mode coverage against known mixture centers.

use serde::Serialize;

use crate::error::{Error, Result};

/// Metrics recorded per refinement step.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub mmd: f64,
    pub energy_distance: f64,
    pub modes_covered: usize,
    pub hq_fraction: f64,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unbiased squared-MMD estimate with kernel `exp(-||a-b||^2 / h)`.
///
/// May be slightly negative by unbiasedness. Exactly symmetric in its
/// arguments: the cross term is summed in a value-canonical order, so
/// `mmd(x, y, h)` and `mmd(y, x, h)` are bit-identical.
pub fn mmd(x: &[Vec<f64>], y: &[Vec<f64>], h: f64) -> Result<f64> {
    let n = x.len();
    let m = y.len();
    if n < 2 || m < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n.min(m) });
    }
    assert!(h > 0.0 && h.is_finite(), "mmd bandwidth must be finite and > 0");

    let mut xx = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                xx += (-sq_dist(&x[i], &x[j]) / h).exp();
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                yy += (-sq_dist(&y[i], &y[j]) / h).exp();
            }
        }
    }
    let mut cross: Vec<f64> = Vec::with_capacity(n * m);
    for xi in x {
        for yj in y {
            cross.push((-sq_dist(xi, yj) / h).exp());
        }
    }
    cross.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let xy: f64 = cross.iter().sum();
    Ok(xx / (n * (n - 1)) as f64 + yy / (m * (m - 1)) as f64 - 2.0 * xy / (n * m) as f64)
}

/// Cap on the number of points entering the median-heuristic scan.
const MEDIAN_SUBSAMPLE: usize = 1024;

/// Median of squared pairwise distances over `x` followed by `y`, the default
/// MMD bandwidth. Large inputs are thinned by a deterministic stride so the
/// cost stays bounded; zero medians fall back to 1.
pub fn median_heuristic_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let all: Vec<&Vec<f64>> = x.iter().chain(y.iter()).collect();
    let stride = all.len().div_ceil(MEDIAN_SUBSAMPLE).max(1);
    let pts: Vec<&Vec<f64>> = all.iter().step_by(stride).copied().collect();
    let mut dists = Vec::with_capacity(pts.len() * (pts.len().saturating_sub(1)) / 2);
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            dists.push(sq_dist(pts[i], pts[j]));
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = dists[dists.len() / 2];
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Energy distance, biased V-statistic form:
/// `2 E||x-y|| - E||x-x'|| - E||y-y'||` over all ordered pairs.
///
/// Exactly zero when `x` and `y` are the same multiset in the same order.
pub fn energy_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let m = y.len();
    if n == 0 || m == 0 {
        return 0.0;
    }
    let mut cross = 0.0;
    for xi in x {
        for yj in y {
            cross += sq_dist(xi, yj).sqrt();
        }
    }
    let mut xx = 0.0;
    for a in x {
        for b in x {
            xx += sq_dist(a, b).sqrt();
        }
    }
    let mut yy = 0.0;
    for a in y {
        for b in y {
            yy += sq_dist(a, b).sqrt();
        }
    }
    2.0 * cross / (n * m) as f64 - xx / (n * n) as f64 - yy / (m * m) as f64
}

/// Number of modes with at least one sample within `radius`, and the fraction
/// of samples within `radius` of some mode.
pub fn mode_coverage(x: &[Vec<f64>], modes: &[Vec<f64>], radius: f64) -> (usize, f64) {
    assert!(radius > 0.0, "mode radius must be > 0");
    let r2 = radius * radius;
    let covered = modes
        .iter()
        .filter(|m| x.iter().any(|s| sq_dist(s, m) <= r2))
        .count();
    if x.is_empty() {
        return (covered, 0.0);
    }
    let hq = x
        .iter()
        .filter(|s| modes.iter().any(|m| sq_dist(s, m) <= r2))
        .count();
    (covered, hq as f64 / x.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use crate::targets::GmmTarget;
    use rand::seq::SliceRandom;

    #[test]
    fn mmd_null_distribution() {
        // Two halves of one i.i.d. sample should give |mmd| within three
        // permutation-null standard deviations.
        let t = GmmTarget::gauss1();
        let mut rng = SeededRng::new(3);
        let mut all = t.sample(4000, &mut rng);
        let h = median_heuristic_bandwidth(&all, &[]);
        let observed = mmd(&all[..2000], &all[2000..], h).unwrap();

        let mut nulls = Vec::new();
        for _ in 0..20 {
            all.shuffle(&mut rng);
            nulls.push(mmd(&all[..2000], &all[2000..], h).unwrap());
        }
        let mean = nulls.iter().sum::<f64>() / nulls.len() as f64;
        let sd = (nulls.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            / (nulls.len() - 1) as f64)
            .sqrt();
        assert!(observed.abs() < 3.0 * sd, "observed {observed}, null sd {sd}");
    }

    /// Closed-form population MMD^2 between two isotropic Gaussians under the
    /// kernel exp(-||a-b||^2/h): each expectation is
    /// (h/(h+2v^2))^(d/2) * exp(-||delta||^2/(h+2v^2)) with v^2 the summed
    /// per-coordinate variances of the pair.
    fn gaussian_mmd_oracle(mu1: &[f64], s1: f64, mu2: &[f64], s2: f64, h: f64) -> f64 {
        let d = mu1.len() as f64;
        let term = |delta_sq: f64, v2: f64| -> f64 {
            (h / (h + 2.0 * v2)).powf(d / 2.0) * (-delta_sq / (h + 2.0 * v2)).exp()
        };
        let delta_sq: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
        term(0.0, 2.0 * s1 * s1) + term(0.0, 2.0 * s2 * s2)
            - 2.0 * term(delta_sq, s1 * s1 + s2 * s2)
    }

    #[test]
    fn mmd_matches_two_gaussian_closed_form() {
        use crate::numerics::gaussian_draws;
        let mut rng = SeededRng::new(8);
        let x = gaussian_draws(&mut rng, 500, 2, 1.0);
        let y: Vec<Vec<f64>> = gaussian_draws(&mut rng, 500, 2, 1.0)
            .into_iter()
            .map(|mut v| {
                v[0] += 10.0;
                v
            })
            .collect();
        let h = 2.0;
        let got = mmd(&x, &y, h).unwrap();
        let expected = gaussian_mmd_oracle(&[0.0, 0.0], 1.0, &[10.0, 0.0], 1.0, h);
        assert!((got - expected).abs() / expected < 0.05, "got {got}, expected {expected}");
    }

    #[test]
    fn mmd_equal_sets_match_independent_loop() {
        use crate::numerics::gaussian_draws;
        let mut rng = SeededRng::new(12);
        let x = gaussian_draws(&mut rng, 40, 2, 1.0);
        let h = 1.5;
        let got = mmd(&x, &x, h).unwrap();

        // Independently written double loop.
        let n = x.len();
        let k = |a: &[f64], b: &[f64]| {
            let mut s = 0.0;
            for c in 0..a.len() {
                s += (a[c] - b[c]).powi(2);
            }
            (-s / h).exp()
        };
        let mut xx = 0.0;
        let mut xy = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    xx += k(&x[i], &x[j]);
                }
                xy += k(&x[i], &x[j]);
            }
        }
        let expected = 2.0 * xx / (n * (n - 1)) as f64 - 2.0 * xy / (n * n) as f64;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn mmd_symmetry_and_too_few() {
        use crate::numerics::gaussian_draws;
        let mut rng = SeededRng::new(19);
        let x = gaussian_draws(&mut rng, 10, 2, 1.0);
        let y = gaussian_draws(&mut rng, 12, 2, 0.5);
        assert_eq!(mmd(&x, &y, 1.0).unwrap(), mmd(&y, &x, 1.0).unwrap());
        assert!(matches!(
            mmd(&x[..1], &y, 1.0),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn energy_distance_identical_sets_is_zero() {
        let x = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 0.0]];
        assert_eq!(energy_distance(&x, &x), 0.0);
    }

    #[test]
    fn energy_distance_point_masses() {
        let x = vec![vec![0.0, 0.0]];
        let y = vec![vec![3.0, 4.0]];
        assert!((energy_distance(&x, &y) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn energy_distance_matches_naive_loop() {
        use crate::numerics::gaussian_draws;
        let mut rng = SeededRng::new(4);
        let x = gaussian_draws(&mut rng, 15, 2, 1.0);
        let y = gaussian_draws(&mut rng, 11, 2, 2.0);
        let got = energy_distance(&x, &y);

        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
        };
        let mut cross = 0.0;
        for a in &x {
            for b in &y {
                cross += dist(a, b);
            }
        }
        let mut xx = 0.0;
        for a in &x {
            for b in &x {
                xx += dist(a, b);
            }
        }
        let mut yy = 0.0;
        for a in &y {
            for b in &y {
                yy += dist(a, b);
            }
        }
        let expected = 2.0 * cross / (15.0 * 11.0) - xx / 225.0 - yy / 121.0;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn mode_coverage_trivial_cases() {
        let modes = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        let (c, hq) = mode_coverage(&modes.clone(), &modes, 0.1);
        assert_eq!(c, 2);
        assert_eq!(hq, 1.0);

        let far = vec![vec![50.0, 50.0]];
        let (c, hq) = mode_coverage(&far, &modes, 0.1);
        assert_eq!(c, 0);
        assert_eq!(hq, 0.0);
    }

    #[test]
    fn mode_coverage_ring8_tail_bound() {
        let t = GmmTarget::ring8();
        let mut rng = SeededRng::new(21);
        let samples = t.sample(800, &mut rng);
        let (covered, hq) = mode_coverage(&samples, &t.mode_centers(), 3.0 * 0.02);
        assert_eq!(covered, 8);
        assert!(hq >= 0.95, "hq {hq}");
    }

    #[test]
    fn mode_coverage_monotone_in_radius() {
        let t = GmmTarget::ring8();
        let mut rng = SeededRng::new(33);
        let samples = t.sample(200, &mut rng);
        let modes = t.mode_centers();
        let mut last = 0;
        for r in [0.01, 0.05, 0.2, 1.0] {
            let (c, _) = mode_coverage(&samples, &modes, r);
            assert!(c >= last);
            last = c;
        }
    }
}
