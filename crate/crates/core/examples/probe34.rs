//! Temporary probe for the ridge-limit and score-quality criteria.

use latentflow::estimators::{fit_kde, fit_krr, DensityEstimate};
use latentflow::kernels::{median_sq_feature_distance, FeatureExtractor, KernelSpec, MollifierSpec};
use latentflow::numerics::{child_seed, gaussian_draws, SeededRng};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

fn stats(est: &DensityEstimate, probes: &[Vec<f64>]) -> (f64, f64) {
    let mut cosines = Vec::new();
    let mut err = 0.0;
    for p in probes {
        let g = est.grad_log_density(p);
        let a: Vec<f64> = p.iter().map(|v| -v).collect();
        cosines.push(cosine(&g, &a));
        err += g.iter().zip(&a).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    }
    cosines.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (cosines[cosines.len() / 2], err / probes.len() as f64)
}

fn probes_within(seed: u64, count: usize, radius: f64) -> Vec<Vec<f64>> {
    let mut rng = SeededRng::new(seed);
    let mut probes = Vec::new();
    while probes.len() < count {
        let p = gaussian_draws(&mut rng, 1, 2, 1.0).remove(0);
        if p.iter().map(|v| v * v).sum::<f64>().sqrt() <= radius {
            probes.push(p);
        }
    }
    probes
}

fn main() {
    // Criterion 3 part 2: krr(1e3) vs kde on 256 samples, probe radius sweep.
    let mut rng = SeededRng::new(child_seed(7, 600));
    let samples = gaussian_draws(&mut rng, 256, 2, 1.0);
    let h = median_sq_feature_distance(&FeatureExtractor::Identity, &samples);
    let spec = KernelSpec::new(FeatureExtractor::Identity, h, MollifierSpec::new(0.0, 1));
    let krr = fit_krr(&samples, &spec, 1000.0, &mut SeededRng::new(1)).unwrap();
    let kde = fit_kde(&samples, &spec, &mut SeededRng::new(1)).unwrap();
    for radius in [1.0, 1.5, 2.0] {
        let probes = probes_within(3131, 20, radius);
        let mut max_diff = 0.0_f64;
        for p in &probes {
            let a = krr.grad_log_density(p);
            let b = kde.grad_log_density(p);
            for (x, y) in a.iter().zip(&b) {
                max_diff = max_diff.max((x - y).abs());
            }
        }
        println!("c3: radius {radius} max diff {max_diff:.5}");
    }

    // Criterion 3 with a fixed narrow bandwidth.
    for hb in [0.5, 1.0] {
        let spec = KernelSpec::new(FeatureExtractor::Identity, hb, MollifierSpec::new(0.0, 1));
        let krr = fit_krr(&samples, &spec, 1000.0, &mut SeededRng::new(1)).unwrap();
        let kde = fit_kde(&samples, &spec, &mut SeededRng::new(1)).unwrap();
        let probes = probes_within(3131, 20, 2.0);
        let mut max_diff = 0.0_f64;
        for p in &probes {
            let a = krr.grad_log_density(p);
            let b = kde.grad_log_density(p);
            for (x, y) in a.iter().zip(&b) {
                max_diff = max_diff.max((x - y).abs());
            }
        }
        println!("c3: h={hb} radius 2 max diff {max_diff:.5}");
    }

    // Criterion 4: (h, eta) landscape at 4096 and per-n error curves.
    let pool = gaussian_draws(&mut SeededRng::new(1009), 4096, 2, 1.0);
    let probes = probes_within(41, 20, 2.0);
    for h in [0.01, 0.02, 0.05, 0.1, 0.5] {
        let spec = KernelSpec::new(FeatureExtractor::Identity, h, MollifierSpec::new(0.0, 1));
        let kde = fit_kde(&pool, &spec, &mut SeededRng::new(5)).unwrap();
        let (kc, ke) = stats(&kde, &probes);
        let mut line = format!("c4 h={h}: kde ({kc:.4}, {ke:.3})");
        for ridge in [0.1, 1.0, 10.0] {
            let est = fit_krr(&pool, &spec, ridge, &mut SeededRng::new(5)).unwrap();
            let (c, e) = stats(&est, &probes);
            line.push_str(&format!(" | eta={ridge} ({c:.4}, {e:.3})"));
        }
        println!("{line}");
    }
    for h in [0.02, 0.05, 0.1] {
        for estimator in ["kde", "krr10"] {
            let mut line = format!("c4 sweep h={h} {estimator}:");
            for n in [256usize, 512, 1024, 2048] {
                let samples = &pool[..n];
                let spec_n =
                    KernelSpec::new(FeatureExtractor::Identity, h, MollifierSpec::new(0.0, 1));
                let est = match estimator {
                    "kde" => fit_kde(samples, &spec_n, &mut SeededRng::new(5)).unwrap(),
                    _ => fit_krr(samples, &spec_n, 10.0, &mut SeededRng::new(5)).unwrap(),
                };
                let (_, e) = stats(&est, &probes);
                line.push_str(&format!(" {e:.4}"));
            }
            println!("{line}");
        }
    }
}
