//! LARS with momentum, learning-rate and EMA schedules.

use std::f64::consts::PI;

use crate::error::{CloveError, Result};
use crate::params::{ParamKind, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LarsConfig {
    pub momentum: f64,
    pub trust_coeff: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for LarsConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            trust_coeff: 0.001,
            weight_decay: 2e-5,
            eps: 1e-9,
        }
    }
}

/// Layer-wise ratio `trust·‖w‖ / (‖g‖ + wd·‖w‖ + eps)`, or 1 when either
/// norm vanishes.
pub fn trust_ratio(w_norm: f64, g_norm: f64, cfg: &LarsConfig) -> f64 {
    if w_norm > 0.0 && g_norm > 0.0 {
        cfg.trust_coeff * w_norm / (g_norm + cfg.weight_decay * w_norm + cfg.eps)
    } else {
        1.0
    }
}

/// One LARS update of a single tensor. `adapt` selects weight decay and
/// trust scaling.
pub fn lars_update(w: &mut [f32], g: &[f32], slot: &mut [f32], lr: f64, adapt: bool, cfg: &LarsConfig) {
    let norm = |v: &[f32]| v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let (wd, local) = if adapt {
        (cfg.weight_decay, trust_ratio(norm(w), norm(g), cfg))
    } else {
        (0.0, 1.0)
    };
    let step = local * lr;
    for ((wi, &gi), si) in w.iter_mut().zip(g).zip(slot.iter_mut()) {
        let u = cfg.momentum * *si as f64 + step * (gi as f64 + wd * *wi as f64);
        *si = u as f32;
        *wi = (*wi as f64 - u) as f32;
    }
}

/// Momentum buffers, one per entry of the parameter set (empty for buffers).
#[derive(Debug, Clone, PartialEq)]
pub struct Lars {
    pub config: LarsConfig,
    pub slots: Vec<Vec<f32>>,
}

impl Lars {
    pub fn new(config: LarsConfig, params: &ParamSet) -> Self {
        let slots = params
            .iter()
            .map(|p| {
                if p.kind.trainable() {
                    vec![0.0; p.tensor.numel()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        Self { config, slots }
    }

    /// Applies the gradients stored on `params`. Refuses the whole step,
    /// leaving everything untouched, if any gradient is non-finite. Missing
    /// gradients count as zero.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if self.slots.len() != params.len() {
            return Err(CloveError::Contract("optimizer slots do not match parameters".into()));
        }
        for p in params.iter() {
            if let Some(g) = p.tensor.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(CloveError::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        for (p, slot) in params.iter_mut().zip(&mut self.slots) {
            if !p.kind.trainable() {
                continue;
            }
            let adapt = p.kind == ParamKind::Weight;
            let n = p.tensor.numel();
            let g = p.tensor.grad().map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            lars_update(p.tensor.data_mut(), &g, slot, lr, adapt, &self.config);
        }
        Ok(())
    }
}

/// Linear warmup to `lr_max`, then cosine decay to `lr_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64, warmup: usize) -> f64 {
    let step = step.min(total);
    if step < warmup {
        return lr_max * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr_max;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * progress).cos())
}

/// Teacher momentum ramp from `alpha0` at step 0 to 1 at `total`.
pub fn ema_alpha(step: usize, total: usize, alpha0: f64) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let progress = step.min(total) as f64 / total as f64;
    1.0 - (1.0 - alpha0) * 0.5 * (1.0 + (PI * progress).cos())
}
