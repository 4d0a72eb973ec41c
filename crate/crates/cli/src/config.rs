//! Run configuration: one TOML file with per-subcommand sections.
//!
//! Parsing is strict — unknown keys are rejected, naming the offending key —
//! and every run writes an "effective config" echo with all defaults
//! resolved, so the numbers in any report trace back to concrete values on
//! disk.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub gan: GanSection,
    pub flow: FlowSection,
    pub ablate: AblateSection,
    pub verify: VerifySection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: String,
    /// Built-in target name (`gauss1`, `ring8`, `grid25`); ignored when
    /// `target_components` is given.
    pub target: String,
    pub target_components: Option<Vec<ComponentCfg>>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: "runs/out".into(),
            target: "ring8".into(),
            target_components: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentCfg {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub stddev: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanSection {
    pub latent_dim: usize,
    pub hidden: usize,
    /// `tanh` or `relu`.
    pub activation: String,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eval_every: usize,
    pub eval_samples: usize,
}

impl Default for GanSection {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            hidden: 64,
            activation: "tanh".into(),
            batch_size: 256,
            steps: 2000,
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            eval_every: 100,
            eval_samples: 512,
        }
    }
}

/// Kernel bandwidth: the string `"median"` or a fixed positive number.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BandwidthCfg {
    Named(String),
    Fixed(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub steps: usize,
    pub particles: usize,
    /// `krr` or `kde`.
    pub estimator: String,
    pub ridge_q: f64,
    pub ridge_p: f64,
    pub sigma: f64,
    pub mollifier_samples: usize,
    /// Enables linear sigma annealing down to this value when set.
    pub sigma_final: Option<f64>,
    pub bandwidth: BandwidthCfg,
    /// `identity` or `disc-hidden` (last hidden layer of the discriminator).
    pub extractor: String,
    /// `mlp` (requires `generator_path`) or `identity`.
    pub generator: String,
    pub generator_path: Option<String>,
    pub discriminator_path: Option<String>,
    /// Target-density term: `estimator` (fit on target samples), `oracle`
    /// (exact mixture score), or `none`.
    pub p_mode: String,
    /// Sample count for the p-side estimator fit.
    pub target_samples: usize,
    /// Held-out reference samples for per-step metrics.
    pub eval_samples: usize,
    /// Mode-coverage radius; defaults to 3x the largest component stddev.
    pub hq_radius: Option<f64>,
    /// `none`, `discriminator`, `mask`, or `component`.
    pub condition: String,
    pub mask: Option<MaskCfg>,
    pub component: Option<ComponentCondCfg>,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self {
            lambda1: 0.3,
            lambda2: 0.3,
            lambda3: 0.0,
            steps: 10,
            particles: 256,
            estimator: "krr".into(),
            ridge_q: 1.0,
            ridge_p: 1.0,
            sigma: 0.1,
            mollifier_samples: 32,
            sigma_final: None,
            bandwidth: BandwidthCfg::Named("median".into()),
            extractor: "disc-hidden".into(),
            generator: "mlp".into(),
            generator_path: None,
            discriminator_path: None,
            p_mode: "estimator".into(),
            target_samples: 256,
            eval_samples: 2000,
            hq_radius: None,
            condition: "none".into(),
            mask: None,
            component: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskCfg {
    pub observed: Vec<usize>,
    pub values: Vec<f64>,
    pub tau: f64,
}

impl Default for MaskCfg {
    fn default() -> Self {
        Self { observed: vec![0], values: vec![0.0], tau: 0.05 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComponentCondCfg {
    pub index: usize,
    pub beta: f64,
}

impl Default for ComponentCondCfg {
    fn default() -> Self {
        Self { index: 0, beta: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub estimators: Vec<String>,
    pub sigmas: Vec<f64>,
    /// `full`, `q-only`, `p-only`, `c-only`.
    pub lambda_settings: Vec<String>,
    pub step_sizes: Vec<f64>,
    pub steps_list: Vec<usize>,
    pub particles: usize,
    pub mollifier_samples: usize,
    pub eval_samples: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            estimators: vec!["krr".into(), "kde".into()],
            sigmas: vec![0.0, 0.1],
            lambda_settings: vec![
                "full".into(),
                "q-only".into(),
                "p-only".into(),
                "c-only".into(),
            ],
            step_sizes: vec![0.1, 0.3, 1.0, 2.0],
            steps_list: vec![10],
            particles: 96,
            mollifier_samples: 16,
            eval_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub sigma_grid: Vec<f64>,
    pub mollifier_samples: usize,
    pub probes: usize,
    pub bandwidth: f64,
    pub eta_grid: Vec<f64>,
    pub krr_matrices: usize,
    pub krr_size: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            sigma_grid: vec![0.05, 0.1, 0.2, 0.4],
            mollifier_samples: 100_000,
            probes: 20,
            bandwidth: 1.0,
            eta_grid: vec![1.0, 10.0, 100.0, 1000.0],
            krr_matrices: 10,
            krr_size: 16,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let choice = |field: &str, value: &str, allowed: &[&str]| -> CliResult<()> {
            if allowed.contains(&value) {
                Ok(())
            } else {
                Err(CliError::Config(format!(
                    "{field} must be one of {allowed:?}, got {value:?}"
                )))
            }
        };
        choice("gan.activation", &self.gan.activation, &["tanh", "relu"])?;
        choice("flow.estimator", &self.flow.estimator, &["krr", "kde"])?;
        choice("flow.extractor", &self.flow.extractor, &["identity", "disc-hidden"])?;
        choice("flow.generator", &self.flow.generator, &["mlp", "identity"])?;
        choice("flow.p_mode", &self.flow.p_mode, &["estimator", "oracle", "none"])?;
        choice(
            "flow.condition",
            &self.flow.condition,
            &["none", "discriminator", "mask", "component"],
        )?;
        for e in &self.ablate.estimators {
            choice("ablate.estimators", e, &["krr", "kde"])?;
        }
        for s in &self.ablate.lambda_settings {
            choice("ablate.lambda_settings", s, &["full", "q-only", "p-only", "c-only"])?;
        }
        if let BandwidthCfg::Named(name) = &self.flow.bandwidth {
            if name != "median" {
                return Err(CliError::Config(format!(
                    "flow.bandwidth must be \"median\" or a positive number, got {name:?}"
                )));
            }
        }
        if let BandwidthCfg::Fixed(h) = &self.flow.bandwidth {
            if *h <= 0.0 || !h.is_finite() {
                return Err(CliError::Config("flow.bandwidth must be > 0".into()));
            }
        }
        if let Some(sf) = self.flow.sigma_final {
            if sf < 0.0 || sf > self.flow.sigma {
                return Err(CliError::Config(
                    "flow.sigma_final must lie in [0, flow.sigma]".into(),
                ));
            }
        }
        Ok(())
    }

    /// Serialize the fully-resolved config (defaults included).
    pub fn effective_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
