//! End-to-end CLI runs driven in-process: artifact layout, exit-code
//! semantics, overrides, and reproducibility of outputs.

use std::path::{Path, PathBuf};

use latentflow::nets::MlpNet;
use latentflow::numerics::SeededRng;
use latentflow_cli::commands::{
    run_ablate, run_refine, run_report, run_train_gan, run_verify, Overrides,
};
use latentflow_cli::{CliError, RunConfig};

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn quick_train_config(dir: &Path) -> String {
    format!(
        r#"
[run]
seed = 9
out_dir = "{}"
target = "ring8"

[gan]
steps = 80
hidden = 16
batch_size = 64
eval_every = 40
eval_samples = 128
"#,
        dir.join("train").display()
    )
}

fn quick_flow_sections(train_dir: &Path) -> String {
    format!(
        r#"
[flow]
steps = 3
particles = 32
mollifier_samples = 8
target_samples = 96
eval_samples = 256
generator_path = "{gen}"
discriminator_path = "{disc}"

[ablate]
estimators = ["krr", "kde"]
sigmas = [0.0, 0.1]
lambda_settings = ["full", "p-only"]
step_sizes = [0.3]
steps_list = [2]
particles = 24
mollifier_samples = 4
eval_samples = 128
"#,
        gen = train_dir.join("generator.bin").display(),
        disc = train_dir.join("discriminator.bin").display(),
    )
}

#[test]
fn train_refine_ablate_report_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let train_dir = dir.join("train");

    let train_cfg = write_config(dir, "train.toml", &quick_train_config(dir));
    run_train_gan(&train_cfg, &Overrides::default()).unwrap();
    for f in ["generator.bin", "discriminator.bin", "history.csv", "manifest.json"] {
        assert!(train_dir.join(f).exists(), "missing {f}");
    }
    let manifest = std::fs::read_to_string(train_dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"ok\""));
    assert!(manifest.contains("\"prng_algorithm\": \"chacha12\""));
    let history = std::fs::read_to_string(train_dir.join("history.csv")).unwrap();
    assert!(history.starts_with("# seed=9\n"));

    // Saved nets reload bit-exactly.
    let gen = MlpNet::load(&train_dir.join("generator.bin")).unwrap();
    let gen2 = MlpNet::load(&train_dir.join("generator.bin")).unwrap();
    let mut rng = SeededRng::new(4);
    for _ in 0..10 {
        let z = latentflow::numerics::gaussian_draws(&mut rng, 1, 2, 1.0).remove(0);
        assert_eq!(gen.forward(&z).unwrap(), gen2.forward(&z).unwrap());
    }

    let full = format!("{}{}", quick_train_config(dir), quick_flow_sections(&train_dir));
    let run_cfg = write_config(dir, "run.toml", &full);

    let refine_out = dir.join("refine");
    run_refine(&run_cfg, &Overrides { out: Some(refine_out.clone()), ..Default::default() })
        .unwrap();
    for f in ["trajectory.jsonl", "particles.csv", "manifest.json", "effective_config.toml"] {
        assert!(refine_out.join(f).exists(), "missing {f}");
    }
    let traj = std::fs::read_to_string(refine_out.join("trajectory.jsonl")).unwrap();
    assert_eq!(traj.lines().count(), 4, "expected T+1 records");

    // Same seed, fresh directory: byte-identical report files.
    let refine_out2 = dir.join("refine2");
    run_refine(&run_cfg, &Overrides { out: Some(refine_out2.clone()), ..Default::default() })
        .unwrap();
    assert_eq!(
        std::fs::read(refine_out.join("trajectory.jsonl")).unwrap(),
        std::fs::read(refine_out2.join("trajectory.jsonl")).unwrap()
    );
    assert_eq!(
        std::fs::read(refine_out.join("particles.csv")).unwrap(),
        std::fs::read(refine_out2.join("particles.csv")).unwrap()
    );

    // Different estimator or seed: different trajectories, both persisted.
    let kde_out = dir.join("refine_kde");
    run_refine(
        &run_cfg,
        &Overrides {
            out: Some(kde_out.clone()),
            estimator: Some("kde".into()),
            ..Default::default()
        },
    )
    .unwrap();
    assert_ne!(
        std::fs::read(refine_out.join("particles.csv")).unwrap(),
        std::fs::read(kde_out.join("particles.csv")).unwrap()
    );
    let effective = std::fs::read_to_string(kde_out.join("effective_config.toml")).unwrap();
    assert!(effective.contains("estimator = \"kde\""));

    // Ablation grid: 2 x 2 x 2 x 1 x 1 cells, all rows present and finite.
    let ablate_out = dir.join("ablate");
    run_ablate(&run_cfg, &Overrides { out: Some(ablate_out.clone()), ..Default::default() })
        .unwrap();
    let csv = std::fs::read_to_string(ablate_out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 8);
    for row in &rows {
        assert!(row.contains(",ok,"), "cell failed: {row}");
    }
    assert!(ablate_out.join("cell_000/trajectory.jsonl").exists());

    // Report renders and writes the plot CSV.
    run_report(&refine_out.join("trajectory.jsonl"), Some(&dir.join("report"))).unwrap();
    let report = std::fs::read_to_string(dir.join("report/report.csv")).unwrap();
    assert!(report.starts_with("# seed=9\n"));
    assert_eq!(report.lines().count(), 2 + 4);
}

#[test]
fn unknown_config_key_is_exit_2_and_names_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", "[run]\nsead = 3\n");
    let err = run_refine(&cfg, &Overrides::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("sead"), "error should name the key: {err}");
}

#[test]
fn missing_net_file_is_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "run.toml",
        &format!(
            "[run]\nout_dir = \"{}\"\n[flow]\ngenerator_path = \"/nonexistent/g.bin\"\ndiscriminator_path = \"/nonexistent/d.bin\"\n",
            tmp.path().join("out").display()
        ),
    );
    let err = run_refine(&cfg, &Overrides::default()).unwrap_err();
    assert_eq!(err.exit_code(), 5);
    // The manifest is left behind with a failure marker.
    let manifest = std::fs::read_to_string(tmp.path().join("out/manifest.json")).unwrap();
    assert!(manifest.contains("failed:"), "{manifest}");
}

#[test]
fn zero_training_steps_persists_initialized_nets() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("t0");
    let cfg = write_config(
        tmp.path(),
        "t0.toml",
        &format!(
            "[run]\nseed = 5\nout_dir = \"{}\"\ntarget = \"gauss1\"\n[gan]\nsteps = 0\nhidden = 8\neval_samples = 64\n",
            out.display()
        ),
    );
    run_train_gan(&cfg, &Overrides::default()).unwrap();
    assert!(out.join("generator.bin").exists());
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3, "header comment + header + initial record");
}

#[test]
fn verify_writes_reports_and_fails_on_short_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("verify");
    let cfg = write_config(
        tmp.path(),
        "verify.toml",
        &format!(
            r#"
[run]
seed = 11
out_dir = "{}"

[verify]
sigma_grid = [0.05, 0.1, 0.2, 0.4]
mollifier_samples = 4000
probes = 5
krr_matrices = 3
krr_size = 8
"#,
            out.display()
        ),
    );
    run_verify(&cfg, &Overrides::default()).unwrap();
    for f in ["smoothing.json", "krr_limit.json", "gradients.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let smoothing = std::fs::read_to_string(out.join("smoothing.json")).unwrap();
    assert!(smoothing.contains("slope_median"));
    assert!(smoothing.contains("per_probe_slopes"));
    let krr = std::fs::read_to_string(out.join("krr_limit.json")).unwrap();
    assert!(krr.contains("frobenius_by_eta"));
    let grads = std::fs::read_to_string(out.join("gradients.json")).unwrap();
    assert!(grads.contains("fd_max_rel_err_by_path"));

    // Byte-identical reports on rerun.
    let out2 = tmp.path().join("verify2");
    run_verify(&cfg, &Overrides { out: Some(out2.clone()), ..Default::default() }).unwrap();
    for f in ["smoothing.json", "krr_limit.json", "gradients.json"] {
        assert_eq!(
            std::fs::read(out.join(f)).unwrap(),
            std::fs::read(out2.join(f)).unwrap(),
            "{f} differs across reruns"
        );
    }

    // Length-1 sigma grid cannot support a slope fit: exit code 4.
    let bad = write_config(
        tmp.path(),
        "verify_bad.toml",
        &format!(
            "[run]\nout_dir = \"{}\"\n[verify]\nsigma_grid = [0.1]\nmollifier_samples = 100\n",
            tmp.path().join("vbad").display()
        ),
    );
    let err = run_verify(&bad, &Overrides::default()).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert!(matches!(err, CliError::Verification(_)));
}

#[test]
fn oracle_p_mode_matches_analytic_step() {
    // Identity generator + oracle score on gauss1: one Euler step has the
    // closed form x <- x - lambda2 * x.
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("oracle");
    let cfg = write_config(
        tmp.path(),
        "oracle.toml",
        &format!(
            r#"
[run]
seed = 21
out_dir = "{}"
target = "gauss1"

[flow]
lambda1 = 0.0
lambda2 = 0.25
lambda3 = 0.0
steps = 1
particles = 8
generator = "identity"
extractor = "identity"
p_mode = "oracle"
eval_samples = 64
"#,
            out.display()
        ),
    );
    run_refine(&cfg, &Overrides::default()).unwrap();
    let csv = std::fs::read_to_string(out.join("particles.csv")).unwrap();
    let z0 = latentflow::numerics::gaussian_draws(&mut SeededRng::new(21), 8, 2, 1.0);
    for (line, z) in csv.lines().skip(2).zip(&z0) {
        let cols: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        for c in 0..2 {
            let expected = z[c] - 0.25 * z[c];
            assert!((cols[2 + c] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn config_requires_sections_for_chosen_condition() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "cond.toml",
        &format!(
            "[run]\nout_dir = \"{}\"\n[flow]\ncondition = \"mask\"\ngenerator = \"identity\"\nextractor = \"identity\"\n",
            tmp.path().join("c").display()
        ),
    );
    let err = run_refine(&cfg, &Overrides::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("flow.mask"));
}

#[test]
fn effective_config_echoes_resolved_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("echo");
    let cfg = write_config(
        tmp.path(),
        "echo.toml",
        &format!(
            "[run]\nseed = 3\nout_dir = \"{}\"\n[verify]\nkrr_matrices = 2\nkrr_size = 4\nmollifier_samples = 500\nprobes = 2\n",
            out.display()
        ),
    );
    run_verify(&cfg, &Overrides::default()).unwrap();
    let text = std::fs::read_to_string(out.join("effective_config.toml")).unwrap();
    let parsed: RunConfig = toml::from_str(&text).unwrap();
    assert_eq!(parsed.run.seed, 3);
    // Defaults resolved into the echo.
    assert_eq!(parsed.flow.particles, 256);
    assert_eq!(parsed.verify.krr_matrices, 2);
}
