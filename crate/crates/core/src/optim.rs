//! SGD with momentum, weight decay and a per-epoch cosine-annealing
//! schedule.

use serde::{Deserialize, Serialize};

use crate::error::{DrlError, Result};
use crate::param::Param;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 20,
            batch_size: 48,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(DrlError::Config("base_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DrlError::Config("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(DrlError::Config("weight_decay must be nonnegative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(DrlError::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `lr(e) = base_lr / 2 * (1 + cos(pi * e / epochs))`, evaluated per epoch.
/// The floor at `e == epochs` is exactly zero.
pub fn cosine_lr(cfg: &OptimizerConfig, epoch: usize) -> f64 {
    let frac = epoch as f64 / cfg.epochs as f64;
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// One optimizer step at the cosine-scheduled rate for `epoch`. Frozen
/// parameters are untouched, bit for bit; gradients of updated parameters
/// are cleared afterwards. Weight decay is skipped for parameters whose
/// `decay` flag is off (biases, normalization gains).
pub fn sgd_step(params: &[Param], cfg: &OptimizerConfig, epoch: usize) {
    let lr = cosine_lr(cfg, epoch);
    for p in params {
        if p.frozen() {
            continue;
        }
        let decay = if p.decay() { cfg.weight_decay } else { 0.0 };
        p.with_inner_mut(|inner| {
            let value = inner.value.data_mut();
            // split borrows: take grad/momentum views separately
            for i in 0..value.len() {
                let g = inner.grad.data()[i] + decay * value[i];
                let m = cfg.momentum * inner.momentum.data()[i] + g;
                inner.momentum.data_mut()[i] = m;
                value[i] -= lr * m;
            }
            inner.grad.fill(0.0);
        });
    }
}
