//! Two-stage refinement for discrete (vector-quantized) latents.
//!
//! The latent is a row of `k` slots, each living near a shared codebook. The
//! continuous machinery cannot move a discrete code directly, so refinement
//! runs in continuous space with a codebook-attraction regularizer
//! `alpha * sum_i ||z_i - e_i||^2` (with `e_i` the currently nearest entry),
//! followed by hard quantization:
//!
//! 1. **Warm-up** — all slots move jointly under the condition gradient plus
//!    the regularizer; this settles the global structure.
//! 2. **Fine-tune** — slots are revisited one at a time in ascending index
//!    order: a few continuous updates of that slot alone (all others frozen
//!    at quantized values), then the slot is snapped to its nearest entry.
//!
//! The regularizer update is a `reg_grad` descent step whose effective
//! coefficient is capped at the quadratic's critical step, so arbitrarily
//! large `alpha` contracts straight onto the nearest entry instead of
//! oscillating.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::conditions::ConditionModel;
use crate::error::{Error, Result};
use crate::nets::MlpNet;
use crate::numerics::{gaussian_draws, SeededRng};

/// Shared dictionary of latent features. At least two pairwise-distinct
/// entries of a common dimension.
#[derive(Debug, Clone)]
pub struct Codebook {
    entries: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn new(entries: Vec<Vec<f64>>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::InvalidConfig("codebook needs at least 2 entries".into()));
        }
        let dim = entries[0].len();
        if entries.iter().any(|e| e.len() != dim) {
            return Err(Error::ShapeMismatch("codebook entries have mixed dimensions".into()));
        }
        for i in 0..entries.len() {
            for j in (i + 1)..entries.len() {
                if entries[i] == entries[j] {
                    return Err(Error::InvalidConfig(format!(
                        "codebook entries {i} and {j} coincide"
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    /// `j` entries drawn once from a seeded standard Gaussian.
    pub fn seeded_gaussian(j: usize, dim: usize, rng: &mut SeededRng) -> Result<Self> {
        Self::new(gaussian_draws(rng, j, dim, 1.0))
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries[0].len()
    }
}

/// Nearest codebook entry by squared distance; ties break to the lowest index.
pub fn quantize(cb: &Codebook, z: &[f64]) -> Result<(usize, Vec<f64>)> {
    if z.len() != cb.dim() {
        return Err(Error::ShapeMismatch(format!(
            "latent has dim {}, codebook dim {}",
            z.len(),
            cb.dim()
        )));
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, e) in cb.entries.iter().enumerate() {
        let d: f64 = z.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok((best, cb.entries[best].clone()))
}

/// A latent made of `k` slots over one codebook dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SlottedLatent {
    pub slots: Vec<Vec<f64>>,
}

impl SlottedLatent {
    pub fn concat(&self) -> Vec<f64> {
        self.slots.concat()
    }
}

/// Gradient of the regularizer `alpha * sum_i ||z_i - e_i||^2` per slot, with
/// `e_i` re-quantized on every call.
pub fn reg_grad(cb: &Codebook, s: &SlottedLatent, alpha_reg: f64) -> Result<Vec<Vec<f64>>> {
    s.slots
        .iter()
        .map(|z| {
            let (_, e) = quantize(cb, z)?;
            Ok(z.iter().zip(&e).map(|(a, b)| 2.0 * alpha_reg * (a - b)).collect())
        })
        .collect()
}

/// Step sizes for one stage: the condition term and the regularizer descent.
#[derive(Debug, Clone, Copy)]
pub struct StageParams {
    pub lambda_cond: f64,
    pub lambda_reg: f64,
}

#[derive(Debug, Clone)]
pub struct DiscreteFlowConfig {
    /// Regularizer weight `alpha`.
    pub alpha_reg: f64,
    pub slots: usize,
    pub warmup_steps: usize,
    /// Continuous updates per slot during fine-tuning.
    pub finetune_steps: usize,
    pub warmup: StageParams,
    pub finetune: StageParams,
}

impl Default for DiscreteFlowConfig {
    fn default() -> Self {
        Self {
            alpha_reg: 10.0,
            slots: 4,
            warmup_steps: 20,
            finetune_steps: 10,
            warmup: StageParams { lambda_cond: 0.3, lambda_reg: 0.05 },
            finetune: StageParams { lambda_cond: 0.3, lambda_reg: 0.0 },
        }
    }
}

impl DiscreteFlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_reg < 0.0 || !self.alpha_reg.is_finite() {
            return Err(Error::InvalidConfig("alpha_reg must be finite and >= 0".into()));
        }
        if self.slots == 0 {
            return Err(Error::InvalidConfig("slot count must be >= 1".into()));
        }
        for (name, p) in [("warmup", self.warmup), ("finetune", self.finetune)] {
            if p.lambda_cond < 0.0 || p.lambda_reg < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} step sizes must be >= 0")));
            }
        }
        Ok(())
    }
}

/// One trace record; `stage` is `warmup` or `slot:<i>`.
#[derive(Debug, Clone, Serialize)]
pub struct DiscreteStepRecord {
    pub seed: u64,
    pub stage: String,
    pub t: usize,
    pub cond_loss: f64,
    pub reg_value: f64,
    pub max_residual: f64,
    pub grad_norm_mean: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DiscreteTrajectory {
    pub seed: u64,
    pub records: Vec<DiscreteStepRecord>,
    /// Condition loss of the latent quantized directly after warm-up,
    /// without any fine-tuning. Baseline for the staged-improvement check.
    pub warmup_only_cond_loss: f64,
    pub final_cond_loss: f64,
}

fn cond_loss(decoder: &MlpNet, cond: &ConditionModel, s: &SlottedLatent) -> Result<f64> {
    let x = decoder.forward(&s.concat())?;
    Ok(-cond.log_likelihood(&x))
}

fn reg_value(cb: &Codebook, s: &SlottedLatent, alpha: f64) -> Result<f64> {
    let mut total = 0.0;
    for z in &s.slots {
        let (_, e) = quantize(cb, z)?;
        total += z.iter().zip(&e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(alpha * total)
}

fn max_residual(cb: &Codebook, s: &SlottedLatent) -> Result<f64> {
    let mut worst = 0.0_f64;
    for z in &s.slots {
        let (_, e) = quantize(cb, z)?;
        let d: f64 = z.iter().zip(&e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        worst = worst.max(d);
    }
    Ok(worst)
}

/// One continuous update of the slots listed in `active`: condition-gradient
/// ascent pulled back through the decoder, then the capped regularizer
/// contraction toward each active slot's (re-quantized) nearest entry.
/// Returns the mean condition-gradient norm over active slots.
pub(crate) fn update_slots(
    decoder: &MlpNet,
    cb: &Codebook,
    cond: &ConditionModel,
    s: &mut SlottedLatent,
    active: &[usize],
    params: StageParams,
    alpha_reg: f64,
    step: usize,
) -> Result<f64> {
    let dim = cb.dim();
    let mut grad_norm = 0.0;
    if params.lambda_cond > 0.0 {
        let flat = s.concat();
        let x = decoder.forward(&flat)?;
        let gc = cond.grad(&x);
        let gz = decoder.vjp_prefix(&flat, &gc, decoder.num_layers())?;
        for &i in active {
            let seg = &gz[i * dim..(i + 1) * dim];
            grad_norm +=
                params.lambda_cond * seg.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (zv, gv) in s.slots[i].iter_mut().zip(seg) {
                *zv += params.lambda_cond * gv;
            }
        }
        grad_norm /= active.len() as f64;
    }
    // Regularizer descent with the coefficient capped at the quadratic's
    // critical step, so large alpha contracts instead of overshooting.
    if params.lambda_reg > 0.0 && alpha_reg > 0.0 {
        let c = (2.0 * alpha_reg * params.lambda_reg).min(1.0);
        for &i in active {
            let (_, e) = quantize(cb, &s.slots[i])?;
            for (zv, ev) in s.slots[i].iter_mut().zip(&e) {
                *zv -= c * (*zv - ev);
            }
        }
    }
    if s.slots.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteUpdate { step });
    }
    Ok(grad_norm)
}

/// Warm-up all slots jointly, then autoregressively fine-tune and quantize
/// each slot in ascending order. The returned latent is fully quantized.
pub fn two_stage_refine(
    decoder: &MlpNet,
    cb: &Codebook,
    cond: &ConditionModel,
    cfg: &DiscreteFlowConfig,
    rng: &mut SeededRng,
) -> Result<(SlottedLatent, DiscreteTrajectory)> {
    cfg.validate()?;
    if decoder.input_dim() != cfg.slots * cb.dim() {
        return Err(Error::ShapeMismatch(format!(
            "decoder expects input dim {}, got {} slots x {} dims",
            decoder.input_dim(),
            cfg.slots,
            cb.dim()
        )));
    }
    cond.validate(decoder.output_dim())?;
    let seed = rng.seed();

    let mut latent = SlottedLatent { slots: gaussian_draws(rng, cfg.slots, cb.dim(), 1.0) };
    let all: Vec<usize> = (0..cfg.slots).collect();
    let mut records = Vec::new();
    let push = |stage: &str,
                    t: usize,
                    grad: Option<f64>,
                    latent: &SlottedLatent,
                    records: &mut Vec<DiscreteStepRecord>|
     -> Result<()> {
        records.push(DiscreteStepRecord {
            seed,
            stage: stage.to_string(),
            t,
            cond_loss: cond_loss(decoder, cond, latent)?,
            reg_value: reg_value(cb, latent, cfg.alpha_reg)?,
            max_residual: max_residual(cb, latent)?,
            grad_norm_mean: grad,
        });
        Ok(())
    };
    push("init", 0, None, &latent, &mut records)?;

    for t in 0..cfg.warmup_steps {
        let g = update_slots(decoder, cb, cond, &mut latent, &all, cfg.warmup, cfg.alpha_reg, t)?;
        push("warmup", t + 1, Some(g), &latent, &mut records)?;
    }

    // Baseline: quantize everything straight after warm-up.
    let mut warmup_only = latent.clone();
    for z in &mut warmup_only.slots {
        let (_, e) = quantize(cb, z)?;
        *z = e;
    }
    let warmup_only_cond_loss = cond_loss(decoder, cond, &warmup_only)?;

    // Fine-tune: the working latent starts from the quantized state; slot i
    // alone moves during its phase and is re-quantized at the end.
    latent = warmup_only;
    for i in 0..cfg.slots {
        let stage = format!("slot:{i}");
        for t in 0..cfg.finetune_steps {
            let g =
                update_slots(decoder, cb, cond, &mut latent, &[i], cfg.finetune, cfg.alpha_reg, t)?;
            push(&stage, t + 1, Some(g), &latent, &mut records)?;
        }
        let (_, e) = quantize(cb, &latent.slots[i])?;
        latent.slots[i] = e;
        push(&stage, cfg.finetune_steps + 1, None, &latent, &mut records)?;
    }

    let final_cond_loss = cond_loss(decoder, cond, &latent)?;
    Ok((
        latent,
        DiscreteTrajectory { seed, records, warmup_only_cond_loss, final_cond_loss },
    ))
}

/// Stage traces as JSONL, mirroring the flow trajectory schema plus `stage`.
pub fn write_discrete_trace_jsonl(traj: &DiscreteTrajectory, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for r in &traj.records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(f, "{line}")?;
    }
    Ok(())
}
