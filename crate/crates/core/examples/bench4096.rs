//! Temporary timing probe (not part of the deliverable).

use latentflow::estimators::{fit_kde, fit_krr};
use latentflow::kernels::{median_sq_feature_distance, FeatureExtractor, KernelSpec, MollifierSpec};
use latentflow::numerics::{gaussian_draws, SeededRng};

fn main() {
    let mut rng = SeededRng::new(3);
    let samples = gaussian_draws(&mut rng, 4096, 2, 1.0);
    let h = median_sq_feature_distance(&FeatureExtractor::Identity, &samples);
    let spec = KernelSpec::new(FeatureExtractor::Identity, h, MollifierSpec::new(0.0, 1));

    let t = std::time::Instant::now();
    let kde = fit_kde(&samples, &spec, &mut SeededRng::new(1)).unwrap();
    println!("kde fit: {:.2}s", t.elapsed().as_secs_f64());

    for ridge in [0.1, 1.0, 10.0] {
        let t = std::time::Instant::now();
        let est = fit_krr(&samples, &spec, ridge, &mut SeededRng::new(1)).unwrap();
        println!(
            "krr fit ridge={ridge}: {:.2}s (w[0]={:.3e})",
            t.elapsed().as_secs_f64(),
            est.weights()[0]
        );
    }

    let t = std::time::Instant::now();
    let probes = gaussian_draws(&mut SeededRng::new(2), 20, 2, 1.0);
    let mut cos_acc = Vec::new();
    for p in &probes {
        let g = kde.grad_log_density(p);
        let a = [-p[0], -p[1]];
        let dot = g[0] * a[0] + g[1] * a[1];
        let ng = (g[0] * g[0] + g[1] * g[1]).sqrt();
        let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
        cos_acc.push(dot / (ng * na).max(1e-12));
    }
    cos_acc.sort_by(|x, y| x.partial_cmp(y).unwrap());
    println!("kde median cosine: {:.4} ({:.2}s)", cos_acc[10], t.elapsed().as_secs_f64());
}
