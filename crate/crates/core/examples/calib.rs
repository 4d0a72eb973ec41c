//! Temporary calibration harness (not part of the deliverable).

use std::sync::Arc;

use latentflow::conditions::ConditionModel;
use latentflow::estimators::EstimatorMode;
use latentflow::flow::{refine, BandwidthRule, EvalSpec, FlowConfig, Generator, PSide};
use latentflow::kernels::{FeatureExtractor, MollifierSpec};
use latentflow::metrics;
use latentflow::nets::{train_toy_gan, GanTrainConfig};
use latentflow::numerics::{child_seed, SeededRng};
use latentflow::targets::GmmTarget;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let gan_steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);
    let hidden: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(64);
    let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(256);
    let target = GmmTarget::ring8();

    let cfg = GanTrainConfig { steps: gan_steps, hidden, batch_size: batch, ..Default::default() };
    let t0 = std::time::Instant::now();
    let (gen, disc, history) = train_toy_gan(&target, &cfg, &mut SeededRng::new(seed)).unwrap();
    println!(
        "gan: steps={} train_time={:.1}s first_mmd={:.4} last_mmd={:.4}",
        gan_steps,
        t0.elapsed().as_secs_f64(),
        history.records.first().unwrap().mmd,
        history.records.last().unwrap().mmd
    );

    // Generator mode coverage before refinement.
    let mut rng = SeededRng::new(child_seed(seed, 900));
    let zs = latentflow::numerics::gaussian_draws(&mut rng, 512, 2, 1.0);
    let xs: Vec<Vec<f64>> = zs.iter().map(|z| gen.forward(z).unwrap()).collect();
    let (modes, hq) = metrics::mode_coverage(&xs, &target.mode_centers(), 0.06);
    println!("generator: modes={modes} hq={hq:.3}");

    // Refinement with defaults.
    let eval = EvalSpec {
        reference: target.sample(2000, &mut SeededRng::new(child_seed(seed, 202))),
        modes: target.mode_centers(),
        radius: 0.06,
        mmd_bandwidth: None,
    };
    let p_samples = target.sample(256, &mut SeededRng::new(child_seed(seed, 201)));
    let flow_cfg = FlowConfig {
        extractor: FeatureExtractor::mlp_hidden(Arc::new(disc.clone()), 2).unwrap(),
        bandwidth: BandwidthRule::MedianHeuristic,
        mollifier: MollifierSpec::new(0.1, 32),
        estimator: EstimatorMode::Krr,
        ..Default::default()
    };
    let t1 = std::time::Instant::now();
    let (_, traj) = refine(
        &Generator::Mlp(gen.clone()),
        PSide::Samples(&p_samples),
        &ConditionModel::None,
        &flow_cfg,
        Some(&eval),
        &mut SeededRng::new(seed),
    )
    .unwrap();
    let first = traj.records.first().unwrap();
    let last = traj.records.last().unwrap();
    println!(
        "refine: time={:.1}s h={:.4} mmd {:.5} -> {:.5} ({:+.1}%) modes {} -> {} hq {:.3} -> {:.3} clamps q={} p={} clips={}",
        t1.elapsed().as_secs_f64(),
        traj.kernel_bandwidth,
        first.mmd.unwrap(),
        last.mmd.unwrap(),
        100.0 * (last.mmd.unwrap() - first.mmd.unwrap()) / first.mmd.unwrap(),
        first.modes_covered.unwrap(),
        last.modes_covered.unwrap(),
        first.hq_fraction.unwrap(),
        last.hq_fraction.unwrap(),
        traj.records.iter().map(|r| r.clamp_count_q).sum::<u64>(),
        traj.records.iter().map(|r| r.clamp_count_p).sum::<u64>(),
        traj.records.iter().map(|r| r.clip_count).sum::<u64>(),
    );

    // Identity-extractor variant for comparison.
    let flow_cfg_id = FlowConfig { extractor: FeatureExtractor::Identity, ..flow_cfg };
    let (_, traj2) = refine(
        &Generator::Mlp(gen),
        PSide::Samples(&p_samples),
        &ConditionModel::None,
        &flow_cfg_id,
        Some(&eval),
        &mut SeededRng::new(seed),
    )
    .unwrap();
    let f2 = traj2.records.first().unwrap();
    let l2 = traj2.records.last().unwrap();
    println!(
        "refine(identity): mmd {:.5} -> {:.5} ({:+.1}%) modes {} -> {}",
        f2.mmd.unwrap(),
        l2.mmd.unwrap(),
        100.0 * (l2.mmd.unwrap() - f2.mmd.unwrap()) / f2.mmd.unwrap(),
        f2.modes_covered.unwrap(),
        l2.modes_covered.unwrap(),
    );
}
