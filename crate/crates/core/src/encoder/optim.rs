//! Adam and the warm-up + cosine decay learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub cfg: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(sizes: &[usize], cfg: AdamConfig) -> Self {
        Self {
            cfg,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut OptimizerState, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
    if params.len() != state.first.len() || grads.len() != params.len() {
        return Err(Error::dim(state.first.len(), params.len()));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        if p.len() != m.len() || g.len() != m.len() {
            return Err(Error::dim(m.len(), g.len()));
        }
    }
    if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite("gradient"));
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.cfg;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warm-up from 0 to `max_lr` over the first
/// `floor(warmup_fraction * total_steps)` steps, then half-cosine decay to 0
/// at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_fraction: f64, max_lr: f64) -> f64 {
    let warmup = (warmup_fraction * total_steps as f64).floor() as usize;
    let step = step.min(total_steps);
    if step < warmup {
        return max_lr * step as f64 / warmup as f64;
    }
    let decay = total_steps - warmup;
    if decay == 0 {
        return max_lr;
    }
    let progress = (step - warmup) as f64 / decay as f64;
    0.5 * max_lr * (1.0 + (PI * progress).cos())
}
