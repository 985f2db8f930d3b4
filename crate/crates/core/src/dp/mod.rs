//! Differential privacy: per-example gradient clipping, the noisy
//! minibatch descent step, and the Rényi-DP accountant.

mod accountant;

pub use accountant::{
    default_alpha_grid, framework_per_round_loss, rdp_sgm_step, topology_budget, PrivacySpend,
    RdpLedger,
};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{loss_and_grad, ModelSpec, ParameterVector};

/// Parameters of the noisy training step and its accounting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpConfig {
    /// L2 clip bound `c` applied to each per-example gradient.
    pub clip_norm: f64,
    /// Noise multiplier `sigma`; the sum of clipped gradients receives
    /// per-coordinate noise of std `sigma * c`.
    pub noise_multiplier: f64,
    /// Per-example inclusion probability `q` of the sampled mechanism.
    pub sampling_rate: f64,
    /// Failure probability for the (epsilon, delta) conversion.
    pub delta: f64,
}

impl DpConfig {
    pub fn new(
        clip_norm: f64,
        noise_multiplier: f64,
        sampling_rate: f64,
        delta: f64,
    ) -> Result<Self> {
        if !(clip_norm > 0.0 && clip_norm.is_finite()) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(noise_multiplier > 0.0 && noise_multiplier.is_finite()) {
            return Err(Error::Config("noise_multiplier must be positive".into()));
        }
        if !(sampling_rate > 0.0 && sampling_rate <= 1.0) {
            return Err(Error::Config("sampling_rate must lie in (0, 1]".into()));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Config("delta must lie in (0, 1)".into()));
        }
        Ok(Self {
            clip_norm,
            noise_multiplier,
            sampling_rate,
            delta,
        })
    }
}

/// Rescale `grad` into the L2 ball of radius `clip_norm`, preserving direction.
pub fn clip_gradient(grad: &ParameterVector, clip_norm: f64) -> Result<ParameterVector> {
    if clip_norm <= 0.0 || clip_norm.is_nan() {
        return Err(Error::Config("clip_norm must be positive".into()));
    }
    let norm = grad.l2_norm();
    let factor = 1.0 / (norm / clip_norm).max(1.0);
    if factor == 1.0 {
        return Ok(grad.clone());
    }
    let values = grad.values().iter().map(|v| v * factor).collect();
    ParameterVector::from_values(grad.layout().to_vec(), values)
}

fn mean_gradient(
    spec: &ModelSpec,
    params: &ParameterVector,
    minibatch: &[Example],
    clip_norm: Option<f64>,
) -> Result<Vec<f64>> {
    if minibatch.is_empty() {
        return Err(Error::Dataset(
            "minibatch must hold at least one example".into(),
        ));
    }
    let mut acc = vec![0.0; params.len()];
    for ex in minibatch {
        let (_, grad) = loss_and_grad(spec, params, ex)?;
        let factor = match clip_norm {
            Some(c) => 1.0 / (grad.l2_norm() / c).max(1.0),
            None => 1.0,
        };
        for (a, g) in acc.iter_mut().zip(grad.values()) {
            *a += g * factor;
        }
    }
    let b = minibatch.len() as f64;
    for a in acc.iter_mut() {
        *a /= b;
    }
    if acc.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("minibatch gradient"));
    }
    Ok(acc)
}

fn descend(params: &ParameterVector, direction: &[f64], learning_rate: f64) -> ParameterVector {
    let values = params
        .values()
        .iter()
        .zip(direction)
        .map(|(p, d)| p - learning_rate * d)
        .collect();
    ParameterVector::from_values(params.layout().to_vec(), values)
        .expect("descent preserves layout and finiteness")
}

/// One minibatch step of clipped SGD without noise. This is exactly the
/// noisy step below with the noise term absent.
pub fn clipped_sgd_step(
    spec: &ModelSpec,
    params: &ParameterVector,
    minibatch: &[Example],
    learning_rate: f64,
    clip_norm: f64,
) -> Result<ParameterVector> {
    let mean = mean_gradient(spec, params, minibatch, Some(clip_norm))?;
    Ok(descend(params, &mean, learning_rate))
}

/// One minibatch step of plain (unclipped, noiseless) SGD.
pub fn plain_sgd_step(
    spec: &ModelSpec,
    params: &ParameterVector,
    minibatch: &[Example],
    learning_rate: f64,
) -> Result<ParameterVector> {
    let mean = mean_gradient(spec, params, minibatch, None)?;
    Ok(descend(params, &mean, learning_rate))
}

/// One differentially private SGD step:
/// `theta' = theta - lr * ((1/b) * sum clip(grad_i, c) + xi)` with
/// per-coordinate noise std `sigma * c / b`, drawn once per step.
pub fn dp_sgd_step<R: Rng>(
    spec: &ModelSpec,
    params: &ParameterVector,
    minibatch: &[Example],
    learning_rate: f64,
    cfg: &DpConfig,
    rng: &mut R,
) -> Result<ParameterVector> {
    let mut mean = mean_gradient(spec, params, minibatch, Some(cfg.clip_norm))?;
    let noise_std = cfg.noise_multiplier * cfg.clip_norm / minibatch.len() as f64;
    for m in mean.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *m += noise_std * z;
    }
    Ok(descend(params, &mean, learning_rate))
}
