//! Adaptive-moment optimiser with global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use super::model::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Gradients are rescaled when their global L2 norm exceeds this.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
        }
    }
}

/// Moment estimates and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// What an [`optimizer_step`] did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied {
        grad_norm: f64,
    },
    /// Non-finite gradient: parameters and state untouched.
    Skipped,
}

pub fn optimizer_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<StepOutcome> {
    if grads.len() != params.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::contract("gradient shapes do not match parameters"));
    }
    let sq: f64 = grads.iter().flatten().map(|g| g * g).sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        log::warn!("non-finite gradient norm, update skipped");
        return Ok(StepOutcome::Skipped);
    }
    if norm == 0.0 {
        // Zero gradient leaves the weights exactly where they are.
        state.step += 1;
        return Ok(StepOutcome::Applied { grad_norm: 0.0 });
    }
    let clip = if norm > config.clip_norm {
        config.clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        for i in 0..g.len() {
            let gi = g[i] * clip;
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
            let mhat = m[i] / bias1;
            let vhat = v[i] / bias2;
            p.values[i] -= config.learning_rate * mhat / (vhat.sqrt() + config.epsilon);
        }
    }
    Ok(StepOutcome::Applied { grad_norm: norm })
}
