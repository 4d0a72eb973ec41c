//! Subcommand implementations. Each run resolves its config, writes the
//! effective-config echo and a manifest, executes, and persists
//! machine-readable outputs (JSONL trajectories, CSV tables, JSON reports).

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use latentflow::conditions::ConditionModel;
use latentflow::estimators::EstimatorMode;
use latentflow::flow::{
    refine, write_particles_csv, write_trajectory_jsonl, BandwidthRule, EvalSpec, FlowConfig,
    Generator, PSide, StepRecord, Trajectory,
};
use latentflow::kernels::{FeatureExtractor, KernelSpec, MollifierSpec};
use latentflow::metrics;
use latentflow::nets::{train_toy_gan, Activation, GanTrainConfig, MlpNet};
use latentflow::numerics::{child_seed, SeededRng};
use latentflow::targets::{GmmComponent, GmmTarget};
use latentflow::verify::{
    random_kernel_psd, verify_gradients, verify_krr_limit, verify_smoothing, KrrLimitReport,
};

use crate::config::{BandwidthCfg, RunConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub estimator: Option<String>,
    pub generator: Option<String>,
}

/// Child-seed tags for streams derived from the run seed.
const TARGET_SAMPLES_TAG: u64 = 201;
const EVAL_SAMPLES_TAG: u64 = 202;
const SMOOTHING_TAG: u64 = 301;
const KRR_MATRIX_TAG: u64 = 400;
const ABLATE_CELL_TAG: u64 = 1000;

fn prepare(config_path: &Path, ov: &Overrides, _command: &str) -> CliResult<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(seed) = ov.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &ov.out {
        cfg.run.out_dir = out.display().to_string();
    }
    if let Some(est) = &ov.estimator {
        cfg.flow.estimator = est.clone();
    }
    if let Some(gen) = &ov.generator {
        cfg.flow.generator = gen.clone();
    }
    cfg.validate()?;
    let out = PathBuf::from(&cfg.run.out_dir);
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("effective_config.toml"), cfg.effective_toml())?;
    Ok((cfg, out))
}

fn resolve_target(cfg: &RunConfig) -> CliResult<GmmTarget> {
    if let Some(comps) = &cfg.run.target_components {
        let components = comps
            .iter()
            .map(|c| GmmComponent { weight: c.weight, mean: c.mean.clone(), stddev: c.stddev })
            .collect();
        Ok(GmmTarget::new(components)?)
    } else {
        GmmTarget::by_name(&cfg.run.target)
            .ok_or_else(|| CliError::Config(format!("unknown target {:?}", cfg.run.target)))
    }
}

fn activation(name: &str) -> Activation {
    match name {
        "relu" => Activation::Relu,
        _ => Activation::Tanh,
    }
}

fn estimator_mode(name: &str) -> EstimatorMode {
    match name {
        "kde" => EstimatorMode::Kde,
        _ => EstimatorMode::Krr,
    }
}

fn finalize(
    mut manifest: RunManifest,
    out: &Path,
    started: Instant,
    result: CliResult<()>,
) -> CliResult<()> {
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    match result {
        Ok(()) => {
            manifest.status = "ok".into();
            manifest.write(out)?;
            Ok(())
        }
        Err(e) => {
            manifest.status = format!("failed: {e}");
            let _ = manifest.write(out);
            Err(e)
        }
    }
}

/// Train the toy GAN and persist both nets, the history CSV, and a manifest.
pub fn run_train_gan(config_path: &Path, ov: &Overrides) -> CliResult<()> {
    let (cfg, out) = prepare(config_path, ov, "train-gan")?;
    let seed = cfg.run.seed;
    let manifest = RunManifest::start("train-gan", seed);
    manifest.write(&out)?;
    let started = Instant::now();

    let body = (|| -> CliResult<()> {
        let target = resolve_target(&cfg)?;
        let gan_cfg = GanTrainConfig {
            latent_dim: cfg.gan.latent_dim,
            data_dim: target.dim(),
            hidden: cfg.gan.hidden,
            activation: activation(&cfg.gan.activation),
            batch_size: cfg.gan.batch_size,
            steps: cfg.gan.steps,
            lr: cfg.gan.lr,
            beta1: cfg.gan.beta1,
            beta2: cfg.gan.beta2,
            eval_every: cfg.gan.eval_every,
            eval_samples: cfg.gan.eval_samples,
        };
        let mut rng = SeededRng::new(seed);
        let (gen, disc, history) = train_toy_gan(&target, &gan_cfg, &mut rng)?;
        gen.save(&out.join("generator.bin"))?;
        disc.save(&out.join("discriminator.bin"))?;

        let mut csv = format!("# seed={seed}\nstep,d_loss,g_loss,mmd\n");
        for r in &history.records {
            csv.push_str(&format!("{},{},{},{}\n", r.step, r.d_loss, r.g_loss, r.mmd));
        }
        std::fs::write(out.join("history.csv"), csv)?;
        Ok(())
    })();
    finalize(manifest, &out, started, body)
}

struct FlowContext {
    target: GmmTarget,
    generator: Generator,
    discriminator: Option<MlpNet>,
    extractor: FeatureExtractor,
    condition: ConditionModel,
}

fn build_flow_context(cfg: &RunConfig) -> CliResult<FlowContext> {
    let target = resolve_target(cfg)?;
    let generator = match cfg.flow.generator.as_str() {
        "identity" => Generator::Identity { dim: target.dim() },
        _ => {
            let path = cfg.flow.generator_path.as_ref().ok_or_else(|| {
                CliError::Config("flow.generator_path required for the mlp generator".into())
            })?;
            Generator::Mlp(MlpNet::load(Path::new(path))?)
        }
    };
    let needs_disc =
        cfg.flow.extractor == "disc-hidden" || cfg.flow.condition == "discriminator";
    let discriminator = if needs_disc {
        let path = cfg.flow.discriminator_path.as_ref().ok_or_else(|| {
            CliError::Config(
                "flow.discriminator_path required for disc-hidden features or the discriminator condition".into(),
            )
        })?;
        Some(MlpNet::load(Path::new(path))?)
    } else {
        None
    };
    let extractor = match cfg.flow.extractor.as_str() {
        "identity" => FeatureExtractor::Identity,
        _ => {
            let d = discriminator.as_ref().expect("checked above");
            FeatureExtractor::mlp_hidden(Arc::new(d.clone()), d.num_layers() - 1)?
        }
    };
    let condition = match cfg.flow.condition.as_str() {
        "none" => ConditionModel::None,
        "discriminator" => ConditionModel::Discriminator {
            net: Arc::new(discriminator.clone().expect("checked above")),
        },
        "mask" => {
            let m = cfg.flow.mask.as_ref().ok_or_else(|| {
                CliError::Config("[flow.mask] section required for the mask condition".into())
            })?;
            ConditionModel::Mask {
                observed: m.observed.clone(),
                values: m.values.clone(),
                tau: m.tau,
            }
        }
        _ => {
            let c = cfg.flow.component.as_ref().ok_or_else(|| {
                CliError::Config(
                    "[flow.component] section required for the component condition".into(),
                )
            })?;
            ConditionModel::Component { target: target.clone(), index: c.index, beta: c.beta }
        }
    };
    Ok(FlowContext { target, generator, discriminator, extractor, condition })
}

fn build_flow_config(cfg: &RunConfig, extractor: FeatureExtractor) -> FlowConfig {
    FlowConfig {
        lambda1: cfg.flow.lambda1,
        lambda2: cfg.flow.lambda2,
        lambda3: cfg.flow.lambda3,
        steps: cfg.flow.steps,
        particles: cfg.flow.particles,
        extractor,
        bandwidth: match cfg.flow.bandwidth {
            BandwidthCfg::Fixed(h) => BandwidthRule::Fixed(h),
            BandwidthCfg::Named(_) => BandwidthRule::MedianHeuristic,
        },
        mollifier: MollifierSpec {
            sigma: cfg.flow.sigma,
            m: cfg.flow.mollifier_samples,
            anneal: cfg
                .flow
                .sigma_final
                .map(|sigma_final| latentflow::kernels::AnnealSpec { sigma_final }),
        },
        ridge_q: cfg.flow.ridge_q,
        ridge_p: cfg.flow.ridge_p,
        estimator: estimator_mode(&cfg.flow.estimator),
    }
}

fn build_eval(cfg: &RunConfig, target: &GmmTarget, seed: u64) -> EvalSpec {
    let mut eval_rng = SeededRng::new(child_seed(seed, EVAL_SAMPLES_TAG));
    let reference = target.sample(cfg.flow.eval_samples, &mut eval_rng);
    EvalSpec {
        modes: target.mode_centers(),
        radius: cfg.flow.hq_radius.unwrap_or(3.0 * target.max_stddev()),
        mmd_bandwidth: None,
        reference,
    }
}

fn trajectory_totals(manifest: &mut RunManifest, traj: &Trajectory) {
    manifest.derived.kernel_bandwidth = Some(traj.kernel_bandwidth);
    manifest.derived.mmd_bandwidth = traj.mmd_bandwidth;
    for r in &traj.records {
        manifest.diagnostics.clamp_q_total += r.clamp_count_q;
        manifest.diagnostics.clamp_p_total += r.clamp_count_p;
        manifest.diagnostics.clip_total += r.clip_count;
    }
}

/// Refine a generator and persist the trajectory and final particles.
pub fn run_refine(config_path: &Path, ov: &Overrides) -> CliResult<()> {
    let (cfg, out) = prepare(config_path, ov, "refine")?;
    let seed = cfg.run.seed;
    let mut manifest = RunManifest::start("refine", seed);
    manifest.write(&out)?;
    let started = Instant::now();

    let mut manifest_updates: Option<Trajectory> = None;
    let body = (|| -> CliResult<()> {
        let ctx = build_flow_context(&cfg)?;
        let flow_cfg = build_flow_config(&cfg, ctx.extractor.clone());
        let eval = build_eval(&cfg, &ctx.target, seed);

        let mut sample_rng = SeededRng::new(child_seed(seed, TARGET_SAMPLES_TAG));
        let p_samples;
        let p_side = match cfg.flow.p_mode.as_str() {
            "none" => PSide::None,
            "oracle" => PSide::Oracle(&ctx.target),
            _ => {
                p_samples = ctx.target.sample(cfg.flow.target_samples, &mut sample_rng);
                PSide::Samples(&p_samples)
            }
        };

        let mut rng = SeededRng::new(seed);
        let (ps, traj) =
            refine(&ctx.generator, p_side, &ctx.condition, &flow_cfg, Some(&eval), &mut rng)?;
        write_trajectory_jsonl(&traj, &out.join("trajectory.jsonl"))?;
        write_particles_csv(&ps, seed, &out.join("particles.csv"))?;
        manifest_updates = Some(traj);
        Ok(())
    })();
    if let Some(traj) = &manifest_updates {
        trajectory_totals(&mut manifest, traj);
    }
    finalize(manifest, &out, started, body)
}

#[derive(Debug, Clone, Serialize)]
struct AblationRow {
    cell: usize,
    estimator: String,
    sigma: f64,
    lambda_setting: String,
    step_size: f64,
    steps: usize,
    status: String,
    flag: String,
    initial_mmd: f64,
    final_mmd: f64,
    modes_covered: i64,
    hq_fraction: f64,
}

/// Cross-product ablation: estimator mode x mollifier sigma x single-term
/// step-size settings x step-size/step-count grid, one seeded run per cell.
/// Failed cells are recorded and the sweep continues.
pub fn run_ablate(config_path: &Path, ov: &Overrides) -> CliResult<()> {
    let (cfg, out) = prepare(config_path, ov, "ablate")?;
    let seed = cfg.run.seed;
    let manifest = RunManifest::start("ablate", seed);
    manifest.write(&out)?;
    let started = Instant::now();

    let body = (|| -> CliResult<()> {
        let ctx = build_flow_context(&cfg)?;
        let target = &ctx.target;

        // Shared held-out reference and a fixed MMD bandwidth keep cells
        // comparable.
        let mut eval_rng = SeededRng::new(child_seed(seed, EVAL_SAMPLES_TAG));
        let reference = target.sample(cfg.ablate.eval_samples, &mut eval_rng);
        let mmd_bw = metrics::median_heuristic_bandwidth(&reference, &[]);
        let eval = EvalSpec {
            reference,
            modes: target.mode_centers(),
            radius: cfg.flow.hq_radius.unwrap_or(3.0 * target.max_stddev()),
            mmd_bandwidth: Some(mmd_bw),
        };
        let mut sample_rng = SeededRng::new(child_seed(seed, TARGET_SAMPLES_TAG));
        let p_samples = target.sample(cfg.flow.target_samples, &mut sample_rng);

        // Condition for the c-term: the discriminator, when present.
        let cell_condition = match &ctx.discriminator {
            Some(d) => ConditionModel::Discriminator { net: Arc::new(d.clone()) },
            None => ConditionModel::None,
        };

        struct Cell {
            idx: usize,
            estimator: String,
            sigma: f64,
            setting: String,
            step_size: f64,
            steps: usize,
        }
        let mut cells = Vec::new();
        for est in &cfg.ablate.estimators {
            for &sigma in &cfg.ablate.sigmas {
                for setting in &cfg.ablate.lambda_settings {
                    for &s in &cfg.ablate.step_sizes {
                        for &steps in &cfg.ablate.steps_list {
                            cells.push(Cell {
                                idx: cells.len(),
                                estimator: est.clone(),
                                sigma,
                                setting: setting.clone(),
                                step_size: s,
                                steps,
                            });
                        }
                    }
                }
            }
        }

        let rows: Vec<AblationRow> = cells
            .par_iter()
            .map(|cell| {
                let (l1, l2, l3) = match cell.setting.as_str() {
                    "q-only" => (cell.step_size, 0.0, 0.0),
                    "p-only" => (0.0, cell.step_size, 0.0),
                    "c-only" => (0.0, 0.0, cell.step_size),
                    _ => (cell.step_size, cell.step_size, cell.step_size),
                };
                let needs_cond = l3 > 0.0;
                let condition = if needs_cond { &cell_condition } else { &ConditionModel::None };
                let flow_cfg = FlowConfig {
                    lambda1: l1,
                    lambda2: l2,
                    lambda3: l3,
                    steps: cell.steps,
                    particles: cfg.ablate.particles,
                    extractor: ctx.extractor.clone(),
                    bandwidth: match cfg.flow.bandwidth {
                        BandwidthCfg::Fixed(h) => BandwidthRule::Fixed(h),
                        BandwidthCfg::Named(_) => BandwidthRule::MedianHeuristic,
                    },
                    mollifier: MollifierSpec::new(cell.sigma, cfg.ablate.mollifier_samples),
                    ridge_q: cfg.flow.ridge_q,
                    ridge_p: cfg.flow.ridge_p,
                    estimator: estimator_mode(&cell.estimator),
                };
                let cell_seed = child_seed(seed, ABLATE_CELL_TAG + cell.idx as u64);
                let mut rng = SeededRng::new(cell_seed);
                let run = (|| -> CliResult<(f64, f64, i64, f64)> {
                    if needs_cond && matches!(condition, ConditionModel::None) {
                        return Err(CliError::Config(
                            "c-term cells need a discriminator".into(),
                        ));
                    }
                    let (ps, traj) = refine(
                        &ctx.generator,
                        PSide::Samples(&p_samples),
                        condition,
                        &flow_cfg,
                        Some(&eval),
                        &mut rng,
                    )?;
                    let cell_dir = out.join(format!("cell_{:03}", cell.idx));
                    std::fs::create_dir_all(&cell_dir)?;
                    write_trajectory_jsonl(&traj, &cell_dir.join("trajectory.jsonl"))?;
                    write_particles_csv(&ps, cell_seed, &cell_dir.join("particles.csv"))?;
                    let first = traj.records.first().expect("trajectory non-empty");
                    let last = traj.records.last().expect("trajectory non-empty");
                    Ok((
                        first.mmd.unwrap_or(f64::NAN),
                        last.mmd.unwrap_or(f64::NAN),
                        last.modes_covered.map_or(-1, |m| m as i64),
                        last.hq_fraction.unwrap_or(f64::NAN),
                    ))
                })();
                match run {
                    Ok((initial_mmd, final_mmd, modes, hq)) => {
                        let flag = if final_mmd > initial_mmd { "mmd-regression" } else { "ok" };
                        AblationRow {
                            cell: cell.idx,
                            estimator: cell.estimator.clone(),
                            sigma: cell.sigma,
                            lambda_setting: cell.setting.clone(),
                            step_size: cell.step_size,
                            steps: cell.steps,
                            status: "ok".into(),
                            flag: flag.into(),
                            initial_mmd,
                            final_mmd,
                            modes_covered: modes,
                            hq_fraction: hq,
                        }
                    }
                    Err(e) => AblationRow {
                        cell: cell.idx,
                        estimator: cell.estimator.clone(),
                        sigma: cell.sigma,
                        lambda_setting: cell.setting.clone(),
                        step_size: cell.step_size,
                        steps: cell.steps,
                        status: format!("failed: {e}"),
                        flag: "numerical-failure".into(),
                        initial_mmd: f64::NAN,
                        final_mmd: f64::NAN,
                        modes_covered: -1,
                        hq_fraction: f64::NAN,
                    },
                }
            })
            .collect();

        let mut csv = format!(
            "# seed={seed}\ncell,estimator,sigma,lambda_setting,step_size,steps,status,flag,initial_mmd,final_mmd,modes_covered,hq_fraction\n"
        );
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.cell,
                r.estimator,
                r.sigma,
                r.lambda_setting,
                r.step_size,
                r.steps,
                r.status.replace(',', ";"),
                r.flag,
                r.initial_mmd,
                r.final_mmd,
                r.modes_covered,
                r.hq_fraction
            ));
        }
        std::fs::write(out.join("ablation.csv"), csv)?;
        Ok(())
    })();
    finalize(manifest, &out, started, body)
}

#[derive(Debug, Serialize)]
struct KrrLimitFile {
    seed: u64,
    reports: Vec<KrrLimitReport>,
    all_strictly_decreasing: bool,
    all_within_envelope: bool,
}

/// Run the three verification procedures and write their JSON reports.
/// Exits with code 4 when any acceptance threshold fails.
pub fn run_verify(config_path: &Path, ov: &Overrides) -> CliResult<()> {
    let (cfg, out) = prepare(config_path, ov, "verify")?;
    let seed = cfg.run.seed;
    let manifest = RunManifest::start("verify", seed);
    manifest.write(&out)?;
    let started = Instant::now();

    let body = (|| -> CliResult<()> {
        let v = &cfg.verify;
        let spec = KernelSpec::new(
            FeatureExtractor::Identity,
            v.bandwidth,
            MollifierSpec::new(v.sigma_grid.first().copied().unwrap_or(0.1), v.mollifier_samples),
        );
        let mut srng = SeededRng::new(child_seed(seed, SMOOTHING_TAG));
        let smoothing =
            verify_smoothing(&spec, &v.sigma_grid, v.mollifier_samples, v.probes, &mut srng)?;
        std::fs::write(
            out.join("smoothing.json"),
            serde_json::to_string_pretty(&smoothing).expect("report serializes") + "\n",
        )?;

        let mut reports = Vec::with_capacity(v.krr_matrices);
        for i in 0..v.krr_matrices {
            let mut krng = SeededRng::new(child_seed(seed, KRR_MATRIX_TAG + i as u64));
            let k = random_kernel_psd(v.krr_size, &mut krng);
            reports.push(verify_krr_limit(&k, &v.eta_grid)?);
        }
        let krr_file = KrrLimitFile {
            seed,
            all_strictly_decreasing: reports.iter().all(|r| r.strictly_decreasing),
            all_within_envelope: reports.iter().all(|r| r.within_envelope),
            reports,
        };
        std::fs::write(
            out.join("krr_limit.json"),
            serde_json::to_string_pretty(&krr_file).expect("report serializes") + "\n",
        )?;

        let gradients = verify_gradients(seed);
        std::fs::write(
            out.join("gradients.json"),
            serde_json::to_string_pretty(&gradients).expect("report serializes") + "\n",
        )?;

        if !(1.5..=2.5).contains(&smoothing.slope_median) {
            return Err(CliError::Verification(format!(
                "smoothing slope {} outside [1.5, 2.5]",
                smoothing.slope_median
            )));
        }
        if let Some(cf) = &smoothing.closed_form {
            if !cf.pass {
                return Err(CliError::Verification(format!(
                    "closed-form deviation {} beyond 3 standard errors",
                    cf.worst_dev_over_3se
                )));
            }
        }
        if !krr_file.all_strictly_decreasing || !krr_file.all_within_envelope {
            return Err(CliError::Verification(
                "ridge-limit distances not strictly decreasing within the envelope".into(),
            ));
        }
        if !gradients.pass {
            return Err(CliError::Verification(format!(
                "gradient audit exceeded tolerance: {:?}",
                gradients.fd_max_rel_err_by_path
            )));
        }
        Ok(())
    })();
    finalize(manifest, &out, started, body)
}

/// Pretty-print a trajectory JSONL and emit a plot-ready CSV next to it.
pub fn run_report(trajectory: &Path, out: Option<&Path>) -> CliResult<()> {
    let text = std::fs::read_to_string(trajectory)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", trajectory.display())))?;
    let records: Vec<StepRecord> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::Config(format!("bad record: {e}"))))
        .collect::<CliResult<_>>()?;
    if records.is_empty() {
        return Err(CliError::Config("trajectory is empty".into()));
    }

    let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    println!("seed {}", records[0].seed);
    println!(
        "{:>4}  {:>12}  {:>6}  {:>8}  {:>10}  {:>8}  {:>7}  {:>7}  {:>5}",
        "t", "mmd", "modes", "hq", "grad_norm", "sigma", "clamp_q", "clamp_p", "clips"
    );
    for r in &records {
        println!(
            "{:>4}  {:>12}  {:>6}  {:>8}  {:>10}  {:>8.4}  {:>7}  {:>7}  {:>5}",
            r.t,
            fmt_opt(r.mmd),
            r.modes_covered.map_or("-".to_string(), |m| m.to_string()),
            fmt_opt(r.hq_fraction),
            fmt_opt(r.grad_norm_mean),
            r.sigma_current,
            r.clamp_count_q,
            r.clamp_count_p,
            r.clip_count
        );
    }

    let csv_path = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            dir.join("report.csv")
        }
        None => trajectory.with_extension("csv"),
    };
    let mut csv = format!("# seed={}\n", records[0].seed);
    csv.push_str("t,mmd,modes_covered,hq_fraction,grad_norm_mean,sigma_current,clamp_count_q,clamp_count_p,clip_count\n");
    let raw_opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in &records {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.t,
            raw_opt(r.mmd),
            r.modes_covered.map_or(String::new(), |m| m.to_string()),
            raw_opt(r.hq_fraction),
            raw_opt(r.grad_norm_mean),
            r.sigma_current,
            r.clamp_count_q,
            r.clamp_count_p,
            r.clip_count
        ));
    }
    std::fs::write(&csv_path, csv)?;
    Ok(())
}
