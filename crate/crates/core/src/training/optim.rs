//! Adaptive-moment optimizer with decoupled weight decay and the
//! piecewise-constant learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { weight_decay: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return config(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return config(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return config(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(len: usize, lr: f64, cfg: &OptimizerConfig) -> OptimizerState {
        OptimizerState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }
}

/// One update. Entries with `frozen[i]` set are left untouched, moments
/// included, and receive no weight decay.
pub fn optimizer_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, frozen: Option<&[bool]>) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return domain(format!(
            "optimizer shapes differ: params {}, grads {}, moments {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        ));
    }
    if let Some(f) = frozen {
        if f.len() != params.len() {
            return domain(format!("freeze mask has {} entries for {} params", f.len(), params.len()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        if frozen.is_some_and(|f| f[i]) {
            continue;
        }
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * (m_hat / (v_hat.sqrt() + state.eps) + state.weight_decay * params[i]);
    }
    Ok(())
}

/// Piecewise-constant schedule: `rates[0]` before `thresholds[0]`,
/// `rates[k]` from `thresholds[k−1]` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub rates: Vec<f64>,
    pub thresholds: Vec<u64>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { rates: vec![1e-4, 5e-5, 2e-5], thresholds: vec![100_000, 150_000] }
    }
}

/// Iteration count the default thresholds refer to.
pub const REFERENCE_ITERATIONS: u64 = 220_000;

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.rates.len() != self.thresholds.len() + 1 {
            return config(format!(
                "schedule needs one more rate than thresholds, got {} rates and {} thresholds",
                self.rates.len(),
                self.thresholds.len()
            ));
        }
        if self.rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return config(format!("learning rates must be finite and non-negative, got {:?}", self.rates));
        }
        if self.thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return config(format!("schedule thresholds must increase, got {:?}", self.thresholds));
        }
        Ok(())
    }

    /// Thresholds rescaled from a run of `from` iterations to one of `to`.
    pub fn scaled(&self, from: u64, to: u64) -> LrSchedule {
        let thresholds = self
            .thresholds
            .iter()
            .map(|t| ((*t as u128 * to as u128 + from as u128 / 2) / from.max(1) as u128) as u64)
            .collect();
        LrSchedule { rates: self.rates.clone(), thresholds }
    }
}

pub fn lr_schedule(step: u64, schedule: &LrSchedule) -> f64 {
    let k = schedule.thresholds.iter().take_while(|t| step >= **t).count();
    schedule.rates[k]
}
