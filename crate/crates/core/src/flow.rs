//! The refinement engine: per-step estimator fits, three gradient terms, and
//! latent updates through the generator.
//!
//! Each step moves every particle's latent code along
//!
//! ```text
//! z <- z - lambda1 * grad_z log q(x)  + lambda2 * grad_z log p(x)
//!        + lambda3 * grad_z log p(c|x),        x = g(z),
//! ```
//!
//! where the data-space gradients are pulled back through the generator by a
//! vector-Jacobian product. `log q` is re-estimated each step from the
//! current particles; `log p` is fitted once per run from target samples (or
//! supplied as an exact oracle); the condition term comes from a
//! [`ConditionModel`]. The first term alone pushes particles apart (it
//! descends the generated density, i.e. raises entropy); the second pulls
//! them toward the data; the third enforces the condition.
//!
//! Per-particle data-space gradients are clipped to `10 * max(active lambda)`
//! before the pullback: overly large steps are the method's known failure
//! mode, and clipping bounds it deterministically. Clip events are logged in
//! the trajectory.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditions::ConditionModel;
use crate::error::{Error, Result};
use crate::estimators::{fit_kde, fit_krr, DensityEstimate, EstimatorMode, ScoreField};
use crate::kernels::{median_sq_feature_distance, FeatureExtractor, KernelSpec, MollifierSpec};
use crate::metrics;
use crate::nets::MlpNet;
use crate::numerics::{child_seed, gaussian_draws, SeededRng};

/// Child-seed tags for the run's derived streams.
const PFIT_TAG: u64 = 0x10;
const QFIT_TAG_BASE: u64 = 0x1000;

/// The frozen sampler being refined.
#[derive(Debug, Clone)]
pub enum Generator {
    /// Data-space flow: `x = z`. Isolates estimator behavior from generator
    /// geometry and doubles as the oracle harness in tests.
    Identity { dim: usize },
    Mlp(MlpNet),
}

impl Generator {
    pub fn latent_dim(&self) -> usize {
        match self {
            Generator::Identity { dim } => *dim,
            Generator::Mlp(net) => net.input_dim(),
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            Generator::Identity { dim } => *dim,
            Generator::Mlp(net) => net.output_dim(),
        }
    }

    pub fn generate(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            Generator::Identity { dim } => {
                if z.len() != *dim {
                    return Err(Error::ShapeMismatch(format!(
                        "latent has length {}, expected {dim}",
                        z.len()
                    )));
                }
                Ok(z.to_vec())
            }
            Generator::Mlp(net) => net.forward(z),
        }
    }
}

/// Pull a data-space gradient back to latent space: `gx^T dg/dz`.
pub fn latent_pullback(g: &Generator, z: &[f64], gx: &[f64]) -> Result<Vec<f64>> {
    match g {
        Generator::Identity { dim } => {
            if z.len() != *dim || gx.len() != *dim {
                return Err(Error::ShapeMismatch("identity pullback dim mismatch".into()));
            }
            Ok(gx.to_vec())
        }
        Generator::Mlp(net) => {
            let (gz, _) = net.vjp(z, gx)?;
            Ok(gz)
        }
    }
}

/// Paired latent codes and generated samples at step `t`. The `x` side is
/// regenerated from `z` after every update, never cached stale.
#[derive(Debug, Clone)]
pub struct ParticleSet {
    pub z: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    pub t: usize,
}

/// How the kernel bandwidth is chosen at run start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthRule {
    Fixed(f64),
    /// Median of squared pairwise feature distances over the initial
    /// particles, computed once per run so the flow objective is stationary.
    MedianHeuristic,
}

/// Source of the target-density term.
pub enum PSide<'a> {
    /// No target information: the data term is forced to zero.
    None,
    /// Fit an estimator once per run on these samples.
    Samples(&'a [Vec<f64>]),
    /// Exact score supplied from outside (oracle runs, tests).
    Oracle(&'a dyn ScoreField),
}

#[derive(Debug, Clone)]
pub struct FlowConfig {
    /// Step size on the generated-density (diversity) term.
    pub lambda1: f64,
    /// Step size on the target-density term.
    pub lambda2: f64,
    /// Step size on the condition term.
    pub lambda3: f64,
    pub steps: usize,
    pub particles: usize,
    pub extractor: FeatureExtractor,
    pub bandwidth: BandwidthRule,
    pub mollifier: MollifierSpec,
    pub ridge_q: f64,
    pub ridge_p: f64,
    pub estimator: EstimatorMode,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, l) in
            [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)]
        {
            if l < 0.0 || !l.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        if self.particles == 0 {
            return Err(Error::InvalidConfig("particle count must be >= 1".into()));
        }
        if self.ridge_q <= 0.0 || self.ridge_p <= 0.0 {
            return Err(Error::InvalidConfig("ridge values must be > 0".into()));
        }
        if let BandwidthRule::Fixed(h) = self.bandwidth {
            if h <= 0.0 || !h.is_finite() {
                return Err(Error::InvalidConfig("bandwidth must be finite and > 0".into()));
            }
        }
        self.mollifier.validate()
    }
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.3,
            lambda2: 0.3,
            lambda3: 0.0,
            steps: 10,
            particles: 256,
            extractor: FeatureExtractor::Identity,
            bandwidth: BandwidthRule::MedianHeuristic,
            mollifier: MollifierSpec::new(0.1, 32),
            ridge_q: 1.0,
            ridge_p: 1.0,
            estimator: EstimatorMode::Krr,
        }
    }
}

/// Reference data for per-step metrics: held-out target samples plus mode
/// centers for coverage.
#[derive(Debug, Clone)]
pub struct EvalSpec {
    pub reference: Vec<Vec<f64>>,
    pub modes: Vec<Vec<f64>>,
    pub radius: f64,
    /// MMD bandwidth; resolved once per run via the median heuristic when
    /// absent, so records stay comparable across steps.
    pub mmd_bandwidth: Option<f64>,
}

/// One trajectory record. Every record carries the run seed so any number in
/// a report traces back to a rerunnable command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub seed: u64,
    pub t: usize,
    pub mmd: Option<f64>,
    pub modes_covered: Option<usize>,
    pub hq_fraction: Option<f64>,
    pub clamp_count_q: u64,
    pub clamp_count_p: u64,
    pub grad_norm_mean: Option<f64>,
    pub sigma_current: f64,
    pub clip_count: u64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub seed: u64,
    /// Resolved kernel bandwidth (after the median heuristic).
    pub kernel_bandwidth: f64,
    /// Resolved MMD bandwidth, when an evaluation set was supplied.
    pub mmd_bandwidth: Option<f64>,
    pub records: Vec<StepRecord>,
}

#[derive(Debug, Clone, Default)]
struct StepDiagnostics {
    grad_norm_mean: f64,
    clip_count: u64,
    clamp_q: u64,
    clamp_p: u64,
}

fn active_lambda_max(cfg: &FlowConfig, p_present: bool, cond: &ConditionModel) -> f64 {
    let mut m = cfg.lambda1;
    if p_present {
        m = m.max(cfg.lambda2);
    }
    if !matches!(cond, ConditionModel::None) {
        m = m.max(cfg.lambda3);
    }
    m
}

/// One discretized flow step: evaluate the combined data-space gradient per
/// particle, clip, pull back through the generator, update latents, and
/// regenerate samples.
pub fn flow_step(
    p: &ParticleSet,
    g: &Generator,
    q_est: &DensityEstimate,
    p_score: Option<&dyn ScoreField>,
    cond: &ConditionModel,
    cfg: &FlowConfig,
) -> Result<ParticleSet> {
    flow_step_diag(p, g, q_est, p_score, cond, cfg).map(|(ps, _)| ps)
}

fn flow_step_diag(
    p: &ParticleSet,
    g: &Generator,
    q_est: &DensityEstimate,
    p_score: Option<&dyn ScoreField>,
    cond: &ConditionModel,
    cfg: &FlowConfig,
) -> Result<(ParticleSet, StepDiagnostics)> {
    let lambda2 = if p_score.is_some() { cfg.lambda2 } else { 0.0 };
    let clamp_q_before = q_est.clamp_events();
    let clamp_p_before = p_score.map_or(0, ScoreField::clamp_events);
    let clip_threshold = 10.0 * active_lambda_max(cfg, p_score.is_some(), cond);

    // Per-particle gradients are independent; results are collected in index
    // order so the step is bit-stable under any thread count.
    let updates: Vec<Result<(Vec<f64>, f64, bool)>> = p
        .z
        .par_iter()
        .zip(p.x.par_iter())
        .map(|(z, x)| {
            let mut gx = vec![0.0; x.len()];
            if cfg.lambda1 > 0.0 {
                for (gi, qi) in gx.iter_mut().zip(q_est.grad_log_density(x)) {
                    *gi -= cfg.lambda1 * qi;
                }
            }
            if lambda2 > 0.0 {
                let ps = p_score.expect("lambda2 forced to 0 without a p-side score");
                for (gi, pi) in gx.iter_mut().zip(ps.grad_log_density(x)) {
                    *gi += lambda2 * pi;
                }
            }
            if cfg.lambda3 > 0.0 {
                for (gi, ci) in gx.iter_mut().zip(cond.grad(x)) {
                    *gi += cfg.lambda3 * ci;
                }
            }
            let norm = gx.iter().map(|v| v * v).sum::<f64>().sqrt();
            let clipped = clip_threshold > 0.0 && norm > clip_threshold;
            if clipped {
                let scale = clip_threshold / norm;
                for v in &mut gx {
                    *v *= scale;
                }
            }
            let gz = latent_pullback(g, z, &gx)?;
            let z_new: Vec<f64> = z.iter().zip(&gz).map(|(a, b)| a + b).collect();
            Ok((z_new, norm, clipped))
        })
        .collect();

    let mut z_new = Vec::with_capacity(p.z.len());
    let mut diag = StepDiagnostics::default();
    for u in updates {
        let (z, norm, clipped) = u?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteUpdate { step: p.t });
        }
        diag.grad_norm_mean += norm;
        diag.clip_count += u64::from(clipped);
        z_new.push(z);
    }
    diag.grad_norm_mean /= p.z.len() as f64;

    let x_new: Vec<Vec<f64>> = z_new.iter().map(|z| g.generate(z)).collect::<Result<_>>()?;
    if x_new.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteUpdate { step: p.t });
    }
    diag.clamp_q = q_est.clamp_events() - clamp_q_before;
    diag.clamp_p = p_score.map_or(0, ScoreField::clamp_events) - clamp_p_before;
    Ok((ParticleSet { z: z_new, x: x_new, t: p.t + 1 }, diag))
}

fn eval_record(
    seed: u64,
    t: usize,
    x: &[Vec<f64>],
    eval: Option<&EvalSpec>,
    mmd_bw: Option<f64>,
    diag: Option<&StepDiagnostics>,
    sigma: f64,
) -> StepRecord {
    let (mmd, modes_covered, hq_fraction) = match (eval, mmd_bw) {
        (Some(e), Some(bw)) => {
            let m = metrics::mmd(x, &e.reference, bw).ok();
            let (covered, hq) = metrics::mode_coverage(x, &e.modes, e.radius);
            (m, Some(covered), Some(hq))
        }
        _ => (None, None, None),
    };
    StepRecord {
        seed,
        t,
        mmd,
        modes_covered,
        hq_fraction,
        clamp_count_q: diag.map_or(0, |d| d.clamp_q),
        clamp_count_p: diag.map_or(0, |d| d.clamp_p),
        grad_norm_mean: diag.map(|d| d.grad_norm_mean),
        sigma_current: sigma,
        clip_count: diag.map_or(0, |d| d.clip_count),
    }
}

/// Run the full refinement loop.
///
/// Latents start from a standard Gaussian; the target-density estimator is
/// fitted once (when samples are given); the generated-density estimator is
/// refitted every step from the current particles with fresh mollifier draws
/// derived from the run seed and step index and the (possibly annealed)
/// mollifier sigma.
pub fn refine(
    g: &Generator,
    p_side: PSide<'_>,
    cond: &ConditionModel,
    cfg: &FlowConfig,
    eval: Option<&EvalSpec>,
    rng: &mut SeededRng,
) -> Result<(ParticleSet, Trajectory)> {
    cfg.validate()?;
    cond.validate(g.data_dim())?;
    let seed = rng.seed();

    let z0 = gaussian_draws(rng, cfg.particles, g.latent_dim(), 1.0);
    let x0: Vec<Vec<f64>> = z0.iter().map(|z| g.generate(z)).collect::<Result<_>>()?;
    let mut ps = ParticleSet { z: z0, x: x0, t: 0 };

    let bandwidth = match cfg.bandwidth {
        BandwidthRule::Fixed(h) => h,
        BandwidthRule::MedianHeuristic => median_sq_feature_distance(&cfg.extractor, &ps.x),
    };

    // The p-side estimator is fitted once per run, at the initial sigma.
    let p_fit: Option<DensityEstimate> = if let PSide::Samples(samples) = &p_side {
        if samples.is_empty() {
            return Err(Error::TooFewSamples { needed: 1, got: 0 });
        }
        let spec = KernelSpec::new(cfg.extractor.clone(), bandwidth, cfg.mollifier.clone());
        let mut prng = SeededRng::new(child_seed(seed, PFIT_TAG));
        Some(match cfg.estimator {
            EstimatorMode::Krr => fit_krr(samples, &spec, cfg.ridge_p, &mut prng)?,
            EstimatorMode::Kde => fit_kde(samples, &spec, &mut prng)?,
        })
    } else {
        None
    };
    let p_score: Option<&dyn ScoreField> = match &p_side {
        PSide::Oracle(o) => Some(*o),
        PSide::Samples(_) => p_fit.as_ref().map(|e| e as &dyn ScoreField),
        PSide::None => None,
    };

    let mmd_bw = eval.map(|e| {
        e.mmd_bandwidth
            .unwrap_or_else(|| metrics::median_heuristic_bandwidth(&e.reference, &ps.x))
    });

    let sigma0 = cfg.mollifier.sigma_at(0, cfg.steps);
    let mut records =
        vec![eval_record(seed, 0, &ps.x, eval, mmd_bw, None, sigma0)];

    for t in 0..cfg.steps {
        let sigma_t = cfg.mollifier.sigma_at(t, cfg.steps);
        let spec_t = KernelSpec::new(
            cfg.extractor.clone(),
            bandwidth,
            MollifierSpec { sigma: sigma_t, m: cfg.mollifier.m, anneal: None },
        );
        let mut qrng = SeededRng::new(child_seed(seed, QFIT_TAG_BASE + t as u64));
        let q_est = match cfg.estimator {
            EstimatorMode::Krr => fit_krr(&ps.x, &spec_t, cfg.ridge_q, &mut qrng)?,
            EstimatorMode::Kde => fit_kde(&ps.x, &spec_t, &mut qrng)?,
        };
        let (next, diag) = flow_step_diag(&ps, g, &q_est, p_score, cond, cfg)?;
        ps = next;
        records.push(eval_record(seed, ps.t, &ps.x, eval, mmd_bw, Some(&diag), sigma_t));
    }

    Ok((ps, Trajectory { seed, kernel_bandwidth: bandwidth, mmd_bandwidth: mmd_bw, records }))
}

/// Stream trajectory records as JSONL, one object per step.
pub fn write_trajectory_jsonl(traj: &Trajectory, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for r in &traj.records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Final particles as CSV: a seed header comment, then one row per particle
/// with latent coordinates followed by data coordinates.
pub fn write_particles_csv(ps: &ParticleSet, seed: u64, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# seed={seed}")?;
    let zdim = ps.z.first().map_or(0, Vec::len);
    let xdim = ps.x.first().map_or(0, Vec::len);
    let mut header: Vec<String> = (0..zdim).map(|i| format!("z{i}")).collect();
    header.extend((0..xdim).map(|i| format!("x{i}")));
    writeln!(f, "{}", header.join(","))?;
    for (z, x) in ps.z.iter().zip(&ps.x) {
        let row: Vec<String> = z.iter().chain(x.iter()).map(|v| format!("{v}")).collect();
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::fit_kde;
    use crate::nets::Activation;
    use crate::numerics::DenseMatrix;
    use crate::targets::{GmmComponent, GmmTarget};

    fn identity_cfg() -> FlowConfig {
        FlowConfig {
            particles: 32,
            mollifier: MollifierSpec::new(0.0, 1),
            bandwidth: BandwidthRule::Fixed(1.0),
            ..Default::default()
        }
    }

    fn kde_on(points: &[Vec<f64>], h: f64) -> DensityEstimate {
        let spec = KernelSpec::new(FeatureExtractor::Identity, h, MollifierSpec::new(0.0, 1));
        fit_kde(points, &spec, &mut SeededRng::new(0)).unwrap()
    }

    #[test]
    fn null_step_changes_only_t() {
        let g = Generator::Identity { dim: 2 };
        let x = vec![vec![0.1, 0.2], vec![-0.4, 0.5]];
        let ps = ParticleSet { z: x.clone(), x: x.clone(), t: 3 };
        let q = kde_on(&x, 1.0);
        let cfg = FlowConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..identity_cfg()
        };
        let out = flow_step(&ps, &g, &q, None, &ConditionModel::None, &cfg).unwrap();
        assert_eq!(out.z, ps.z);
        assert_eq!(out.x, ps.x);
        assert_eq!(out.t, 4);
    }

    #[test]
    fn oracle_score_step_is_explicit_euler() {
        // Identity generator, oracle p-score of a single Gaussian: the update
        // is exactly x <- x - s (x - mu) / sigma^2.
        let mu = [0.5, -1.0];
        let stddev = 2.0;
        let target = GmmTarget::new(vec![GmmComponent {
            weight: 1.0,
            mean: mu.to_vec(),
            stddev,
        }])
        .unwrap();
        let g = Generator::Identity { dim: 2 };
        let x = vec![vec![1.0, 1.0], vec![-0.5, 0.25]];
        let ps = ParticleSet { z: x.clone(), x: x.clone(), t: 0 };
        let q = kde_on(&x, 1.0);
        let s = 0.3;
        let cfg = FlowConfig { lambda1: 0.0, lambda2: s, lambda3: 0.0, ..identity_cfg() };
        let out =
            flow_step(&ps, &g, &q, Some(&target), &ConditionModel::None, &cfg).unwrap();
        for (xi, xo) in x.iter().zip(&out.x) {
            for c in 0..2 {
                let expected = xi[c] - s * (xi[c] - mu[c]) / (stddev * stddev);
                assert!((xo[c] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn step_displacement_bounded_by_clip() {
        let mut rng = SeededRng::new(5);
        let g = Generator::Identity { dim: 2 };
        let target = GmmTarget::gauss1();
        let samples = target.sample(128, &mut rng);
        let cfg = FlowConfig { particles: 64, steps: 1, ..identity_cfg() };
        let (ps, _) = refine(
            &g,
            PSide::Samples(&samples),
            &ConditionModel::None,
            &cfg,
            None,
            &mut SeededRng::new(9),
        )
        .unwrap();
        // Every particle moved, and no move exceeds the clip bound.
        let z0 = gaussian_draws(&mut SeededRng::new(9), 64, 2, 1.0);
        let bound = 10.0 * cfg.lambda1.max(cfg.lambda2) + 1e-12;
        for (a, b) in z0.iter().zip(&ps.z) {
            let d: f64 =
                a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            assert!(d > 0.0, "particle did not move");
            assert!(d <= bound, "displacement {d} exceeds clip bound {bound}");
        }
    }

    #[test]
    fn latent_pullback_identity_and_linear() {
        let g = Generator::Identity { dim: 2 };
        assert_eq!(latent_pullback(&g, &[0.0, 0.0], &[1.5, -2.0]).unwrap(), vec![1.5, -2.0]);

        // Linear generator via relu on positives: x = A z.
        let mut net = MlpNet::zeros(2, 2, 2, Activation::Relu);
        let a = [[1.0, 2.0], [0.5, -0.25]];
        for (l, w) in net.weights_mut().iter_mut().enumerate() {
            for i in 0..2 {
                for j in 0..2 {
                    w.set(i, j, if l == 0 { a[i][j] } else if i == j { 1.0 } else { 0.0 });
                }
            }
        }
        // Keep the hidden pre-activations positive.
        let z = [1.0, 0.5];
        let gx = [2.0, 4.0];
        let got = latent_pullback(&Generator::Mlp(net), &z, &gx).unwrap();
        let expected = [
            a[0][0] * gx[0] + a[1][0] * gx[1],
            a[0][1] * gx[0] + a[1][1] * gx[1],
        ];
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn latent_pullback_matches_finite_differences() {
        let net = MlpNet::new(3, 6, 2, Activation::Tanh, &mut SeededRng::new(3));
        let g = Generator::Mlp(net.clone());
        let mut rng = SeededRng::new(4);
        let z = gaussian_draws(&mut rng, 1, 3, 1.0).remove(0);
        let gx = gaussian_draws(&mut rng, 1, 2, 1.0).remove(0);
        let got = latent_pullback(&g, &z, &gx).unwrap();
        let h = 1e-5;
        let f = |z: &[f64]| -> f64 {
            net.forward(z).unwrap().iter().zip(&gx).map(|(a, b)| a * b).sum()
        };
        for c in 0..3 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[c] += h;
            zm[c] -= h;
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            assert!((got[c] - fd).abs() / fd.abs().max(1e-6) < 1e-4);
        }
    }

    #[test]
    fn refine_zero_steps_returns_initial_particles() {
        let g = Generator::Identity { dim: 2 };
        let cfg = FlowConfig { steps: 0, particles: 16, ..identity_cfg() };
        let (ps, traj) = refine(
            &g,
            PSide::None,
            &ConditionModel::None,
            &cfg,
            None,
            &mut SeededRng::new(2),
        )
        .unwrap();
        assert_eq!(ps.t, 0);
        assert_eq!(traj.records.len(), 1);
        let z0 = gaussian_draws(&mut SeededRng::new(2), 16, 2, 1.0);
        assert_eq!(ps.z, z0);
    }

    #[test]
    fn refine_consistency_and_determinism() {
        let mut rng = SeededRng::new(6);
        let target = GmmTarget::gauss1();
        let samples = target.sample(96, &mut rng);
        let net = MlpNet::new(2, 8, 2, Activation::Tanh, &mut rng);
        let g = Generator::Mlp(net.clone());
        let cfg = FlowConfig { particles: 24, steps: 3, ..identity_cfg() };

        let run = |seed: u64| {
            refine(
                &g,
                PSide::Samples(&samples),
                &ConditionModel::None,
                &cfg,
                None,
                &mut SeededRng::new(seed),
            )
            .unwrap()
        };
        let (ps1, t1) = run(11);
        let (ps2, t2) = run(11);
        assert_eq!(ps1.z, ps2.z);
        assert_eq!(ps1.x, ps2.x);
        assert_eq!(t1.records.len(), t2.records.len());
        for (a, b) in t1.records.iter().zip(&t2.records) {
            assert_eq!(a.grad_norm_mean, b.grad_norm_mean);
        }
        // x is exactly the regenerated image of z.
        for (z, x) in ps1.z.iter().zip(&ps1.x) {
            assert_eq!(net.forward(z).unwrap(), *x);
        }
    }

    #[test]
    fn null_condition_matches_zero_lambda3() {
        let mut rng = SeededRng::new(7);
        let target = GmmTarget::gauss1();
        let samples = target.sample(64, &mut rng);
        let g = Generator::Identity { dim: 2 };
        let base = FlowConfig { particles: 16, steps: 2, ..identity_cfg() };

        let with_cond = FlowConfig { lambda3: 0.7, ..base.clone() };
        let (a, _) = refine(
            &g,
            PSide::Samples(&samples),
            &ConditionModel::None,
            &with_cond,
            None,
            &mut SeededRng::new(13),
        )
        .unwrap();
        let without = FlowConfig { lambda3: 0.0, ..base };
        let (b, _) = refine(
            &g,
            PSide::Samples(&samples),
            &ConditionModel::None,
            &without,
            None,
            &mut SeededRng::new(13),
        )
        .unwrap();
        assert_eq!(a.z, b.z);
    }

    #[test]
    fn entropy_term_spreads_collapsed_particles() {
        // Tight cluster, identity generator, only lambda1: mean pairwise
        // distance strictly increases after one step.
        let mut rng = SeededRng::new(8);
        let jitter = gaussian_draws(&mut rng, 24, 2, 1e-3);
        let x: Vec<Vec<f64>> =
            jitter.into_iter().map(|j| vec![0.5 + j[0], -0.25 + j[1]]).collect();
        let ps = ParticleSet { z: x.clone(), x: x.clone(), t: 0 };
        let g = Generator::Identity { dim: 2 };
        let h = median_sq_feature_distance(&FeatureExtractor::Identity, &x);
        let q = kde_on(&x, h);
        let cfg = FlowConfig {
            lambda1: 0.05,
            lambda2: 0.0,
            lambda3: 0.0,
            bandwidth: BandwidthRule::Fixed(h),
            ..identity_cfg()
        };
        let out = flow_step(&ps, &g, &q, None, &ConditionModel::None, &cfg).unwrap();

        let mean_pairwise = |pts: &[Vec<f64>]| -> f64 {
            let mut total = 0.0;
            let mut count = 0;
            for i in 0..pts.len() {
                for j in (i + 1)..pts.len() {
                    let d: f64 = pts[i]
                        .iter()
                        .zip(&pts[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    total += d;
                    count += 1;
                }
            }
            total / count as f64
        };
        assert!(
            mean_pairwise(&out.x) > mean_pairwise(&x),
            "diversity term failed to spread particles"
        );
    }

    #[test]
    fn single_term_runs_produce_distinct_trajectories() {
        let mut rng = SeededRng::new(10);
        let target = GmmTarget::ring8();
        let samples = target.sample(96, &mut rng);
        let disc = MlpNet::new(2, 8, 1, Activation::Tanh, &mut rng);
        let g = Generator::Identity { dim: 2 };
        let base = FlowConfig { particles: 24, steps: 2, ..identity_cfg() };
        let cond = ConditionModel::Discriminator { net: std::sync::Arc::new(disc) };

        let mut finals = Vec::new();
        for (l1, l2, l3) in [(0.3, 0.0, 0.0), (0.0, 0.3, 0.0), (0.0, 0.0, 0.3)] {
            let cfg = FlowConfig { lambda1: l1, lambda2: l2, lambda3: l3, ..base.clone() };
            let (ps, _) = refine(
                &g,
                PSide::Samples(&samples),
                &cond,
                &cfg,
                None,
                &mut SeededRng::new(21),
            )
            .unwrap();
            finals.push(ps.x);
        }
        assert_ne!(finals[0], finals[1]);
        assert_ne!(finals[1], finals[2]);
        assert_ne!(finals[0], finals[2]);
    }

    #[test]
    fn non_finite_update_detected() {
        // An oracle returning infinite scores drives the clipped gradient to
        // NaN, which must surface as NonFiniteUpdate rather than propagate.
        struct BadOracle;
        impl ScoreField for BadOracle {
            fn log_density(&self, _x: &[f64]) -> f64 {
                0.0
            }
            fn grad_log_density(&self, x: &[f64]) -> Vec<f64> {
                vec![f64::INFINITY; x.len()]
            }
        }
        let g = Generator::Identity { dim: 2 };
        let x = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let ps = ParticleSet { z: x.clone(), x: x.clone(), t: 0 };
        let q = kde_on(&x, 1.0);
        let cfg = FlowConfig { lambda1: 0.0, lambda2: 1.0, lambda3: 0.0, ..identity_cfg() };
        let err = flow_step(&ps, &g, &q, Some(&BadOracle), &ConditionModel::None, &cfg);
        assert!(matches!(err, Err(Error::NonFiniteUpdate { .. })));
    }

    #[test]
    fn trajectory_files_roundtrip() {
        let g = Generator::Identity { dim: 2 };
        let target = GmmTarget::gauss1();
        let mut rng = SeededRng::new(14);
        let samples = target.sample(64, &mut rng);
        let eval = EvalSpec {
            reference: target.sample(128, &mut rng),
            modes: target.mode_centers(),
            radius: 3.0,
            mmd_bandwidth: None,
        };
        let cfg = FlowConfig { particles: 16, steps: 2, ..identity_cfg() };
        let (ps, traj) = refine(
            &g,
            PSide::Samples(&samples),
            &ConditionModel::None,
            &cfg,
            Some(&eval),
            &mut SeededRng::new(15),
        )
        .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let jsonl = dir.path().join("trajectory.jsonl");
        let csv = dir.path().join("particles.csv");
        write_trajectory_jsonl(&traj, &jsonl).unwrap();
        write_particles_csv(&ps, traj.seed, &csv).unwrap();

        let text = std::fs::read_to_string(&jsonl).unwrap();
        assert_eq!(text.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["seed"], 15);
        assert_eq!(first["t"], 0);
        assert!(first["mmd"].is_number());

        let csv_text = std::fs::read_to_string(&csv).unwrap();
        assert!(csv_text.starts_with("# seed=15\nz0,z1,x0,x1\n"));
        assert_eq!(csv_text.lines().count(), 2 + 16);
    }

    #[test]
    fn oracle_matches_estimator_free_path() {
        // PSide::Oracle bypasses fitting entirely; identity generator with
        // a quadratic target reproduces the hand-computed Euler step.
        let target = GmmTarget::gauss1();
        let g = Generator::Identity { dim: 2 };
        let cfg = FlowConfig {
            lambda1: 0.0,
            lambda2: 0.25,
            lambda3: 0.0,
            particles: 8,
            steps: 1,
            ..identity_cfg()
        };
        let (ps, _) = refine(
            &g,
            PSide::Oracle(&target),
            &ConditionModel::None,
            &cfg,
            None,
            &mut SeededRng::new(44),
        )
        .unwrap();
        let z0 = gaussian_draws(&mut SeededRng::new(44), 8, 2, 1.0);
        for (a, b) in z0.iter().zip(&ps.x) {
            for c in 0..2 {
                let expected = a[c] - 0.25 * a[c];
                assert!((b[c] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_validation() {
        let bad = FlowConfig { lambda1: -0.1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = FlowConfig { particles: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = FlowConfig { ridge_q: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = FlowConfig { bandwidth: BandwidthRule::Fixed(0.0), ..Default::default() };
        assert!(bad.validate().is_err());
        let _ = DenseMatrix::zeros(1, 1);
    }
}
