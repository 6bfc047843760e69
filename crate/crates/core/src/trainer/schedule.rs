//! Learning-rate and EMA-momentum schedules.
//!
//! Interpolations are written as convex combinations so that every schedule
//! endpoint is reproduced exactly in floating point.

use super::TrainConfig;
use crate::model::ParamGroup;

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a * (1.0 - t) + b * t
}

/// Learning rate of the schedule at optimizer step `step` (0-based). During
/// the first `phase1_steps` steps this is the predictor rate; afterwards it
/// is shared by all groups: linear warmup from `lr_start` to `lr_peak`, then
/// cosine decay to `lr_end` at the last step.
pub fn lr_at_step(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    if step < cfg.phase1_steps {
        return cfg.phase1_lr;
    }
    let s = step - cfg.phase1_steps;
    if s < cfg.warmup_steps {
        return lerp(cfg.lr_start, cfg.lr_peak, s as f64 / cfg.warmup_steps as f64);
    }
    let last = total_steps.saturating_sub(cfg.phase1_steps).saturating_sub(1);
    if last <= cfg.warmup_steps {
        return cfg.lr_peak;
    }
    let progress = ((s - cfg.warmup_steps) as f64 / (last - cfg.warmup_steps) as f64).min(1.0);
    let w = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.lr_peak * w + cfg.lr_end * (1.0 - w)
}

/// Rate applied to `group` at `step`; the encoder and the MLM head are frozen
/// during phase 1.
pub fn group_lr(cfg: &TrainConfig, group: ParamGroup, step: usize, total_steps: usize) -> f64 {
    if step < cfg.phase1_steps && group != ParamGroup::Predictor {
        0.0
    } else {
        lr_at_step(cfg, step, total_steps)
    }
}

/// Linear EMA momentum from `ema_start` at step 0 to `ema_end` at
/// `total_steps`.
pub fn ema_momentum_at_step(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return cfg.ema_end;
    }
    lerp(cfg.ema_start, cfg.ema_end, step.min(total_steps) as f64 / total_steps as f64)
}
