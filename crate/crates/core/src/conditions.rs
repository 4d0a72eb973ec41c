//! Condition models: computable surrogates for `log p(c|x)` and its gradient.
//!
//! Three toy-scale variants beyond the empty condition: the discriminator
//! logit (`log p(c|x) = d(x)` up to a constant that never matters, since only
//! gradients enter the updates), a masked-observation penalty (the inpainting
//! analog), and a tempered mixture-component posterior (the label analog).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nets::MlpNet;
use crate::targets::GmmTarget;

#[derive(Clone)]
pub enum ConditionModel {
    /// Empty condition set: log-likelihood 0, gradient 0.
    None,
    /// Scalar logit of a trained discriminator.
    Discriminator { net: Arc<MlpNet> },
    /// Quadratic penalty on observed coordinates:
    /// `-||x[obs] - c||^2 / (2 tau^2)`.
    Mask { observed: Vec<usize>, values: Vec<f64>, tau: f64 },
    /// Tempered log posterior of one mixture component:
    /// `beta * log p(component = index | x)`.
    Component { target: GmmTarget, index: usize, beta: f64 },
}

impl std::fmt::Debug for ConditionModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConditionModel::None => write!(f, "None"),
            ConditionModel::Discriminator { .. } => write!(f, "Discriminator"),
            ConditionModel::Mask { observed, tau, .. } => {
                write!(f, "Mask {{ observed: {observed:?}, tau: {tau} }}")
            }
            ConditionModel::Component { index, beta, .. } => {
                write!(f, "Component {{ index: {index}, beta: {beta} }}")
            }
        }
    }
}

impl ConditionModel {
    pub fn validate(&self, data_dim: usize) -> Result<()> {
        match self {
            ConditionModel::None => Ok(()),
            ConditionModel::Discriminator { net } => {
                if net.input_dim() != data_dim {
                    return Err(Error::ShapeMismatch(format!(
                        "discriminator expects dim {}, data dim is {data_dim}",
                        net.input_dim()
                    )));
                }
                Ok(())
            }
            ConditionModel::Mask { observed, values, tau } => {
                if observed.len() != values.len() {
                    return Err(Error::ShapeMismatch(
                        "mask indices and values differ in length".into(),
                    ));
                }
                if observed.iter().any(|&i| i >= data_dim) {
                    return Err(Error::InvalidConfig("mask index out of range".into()));
                }
                if *tau <= 0.0 || !tau.is_finite() {
                    return Err(Error::InvalidConfig("mask tau must be finite and > 0".into()));
                }
                Ok(())
            }
            ConditionModel::Component { target, index, beta } => {
                if *index >= target.components().len() {
                    return Err(Error::InvalidConfig("component index out of range".into()));
                }
                if *beta <= 0.0 || !beta.is_finite() {
                    return Err(Error::InvalidConfig("beta must be finite and > 0".into()));
                }
                if target.dim() != data_dim {
                    return Err(Error::ShapeMismatch("component target dim mismatch".into()));
                }
                Ok(())
            }
        }
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        match self {
            ConditionModel::None => 0.0,
            ConditionModel::Discriminator { net } => {
                net.forward(x).expect("data dim matches discriminator")[0]
            }
            ConditionModel::Mask { observed, values, tau } => {
                let mut sq = 0.0;
                for (&i, &c) in observed.iter().zip(values) {
                    sq += (x[i] - c) * (x[i] - c);
                }
                -sq / (2.0 * tau * tau)
            }
            ConditionModel::Component { target, index, beta } => {
                beta * target.component_posterior(x)[*index].max(f64::MIN_POSITIVE).ln()
            }
        }
    }

    /// Gradient of [`Self::log_likelihood`] in data space.
    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        match self {
            ConditionModel::None => vec![0.0; x.len()],
            ConditionModel::Discriminator { net } => {
                let (gx, _) = net.vjp(x, &[1.0]).expect("data dim matches discriminator");
                gx
            }
            ConditionModel::Mask { observed, values, tau } => {
                let mut g = vec![0.0; x.len()];
                for (&i, &c) in observed.iter().zip(values) {
                    g[i] = -(x[i] - c) / (tau * tau);
                }
                g
            }
            ConditionModel::Component { target, index, beta } => {
                // grad log p(j|x) = score_j(x) - score(x), with
                // score_j = -(x - mu_j)/s_j^2.
                let comp = &target.components()[*index];
                let inv_var = 1.0 / (comp.stddev * comp.stddev);
                let mix = target.score(x);
                x.iter()
                    .zip(&comp.mean)
                    .zip(mix)
                    .map(|((xi, mi), s)| beta * ((mi - xi) * inv_var - s))
                    .collect()
            }
        }
    }
}
