//! Two-phase optimization: predictor warmup with a frozen encoder, then
//! joint training with warmup/cosine learning rates, gradient accumulation,
//! SGD with momentum and an annealed EMA target encoder.

mod batch;
mod gradcheck;
mod run;
mod schedule;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Grads;
use crate::genomics_io::GenomicsError;
use crate::losses::{LossBreakdown, LossError, LossWeights};
use crate::masking::{MaskConfig, MaskError};
use crate::model::{CheckpointError, ModelError, ModelState};
use crate::par::Execution;
use crate::tensor::{Matrix, Scalar};

pub use batch::{batch_gradients, mean_feature_std, prepare_micro_batch, BatchOutput, PreparedSample};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, GroupCheck, ZERO_GRAD};
pub use run::{
    corpus_digest, load_checkpoint, run_pretraining, total_steps, CheckpointMeta, RunOptions, RunOutcome,
    METRICS_COLUMNS,
};
pub use schedule::{ema_momentum_at_step, group_lr, lr_at_step};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("corpus of {samples} samples yields no optimizer step with batch_size {batch} and accum_steps {accum}")]
    TooFewSamples { samples: usize, batch: usize, accum: usize },
    #[error("a sample has no content tokens")]
    EmptySample,
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: String },
    #[error("checkpoint does not match this run: {0}")]
    ResumeMismatch(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Genomics(#[from] GenomicsError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint metadata: {0}")]
    Json(#[from] serde_json::Error),
}

/// Optimization hyper-parameters. Defaults follow the published
/// continual-training recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Steps during which only the predictor is trained.
    pub phase1_steps: usize,
    pub phase1_lr: f64,
    pub warmup_steps: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub epochs: usize,
    pub ema_start: f64,
    pub ema_end: f64,
    pub mask: MaskConfig,
    pub weights: LossWeights,
    pub seed: u64,
    /// Optimizer steps between checkpoints.
    pub checkpoint_every: usize,
    /// Rescale the averaged gradient to this global L2 norm when it is
    /// larger. Off by default.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase1_steps: 1000,
            phase1_lr: 1e-5,
            warmup_steps: 500,
            lr_start: 3e-6,
            lr_peak: 5e-6,
            lr_end: 1e-6,
            momentum: 0.9,
            weight_decay: 0.01,
            batch_size: 32,
            accum_steps: 4,
            epochs: 5,
            ema_start: 0.996,
            ema_end: 1.0,
            mask: MaskConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 500,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        for (name, v) in [
            ("train.phase1_lr", self.phase1_lr),
            ("train.lr_start", self.lr_start),
            ("train.lr_peak", self.lr_peak),
            ("train.lr_end", self.lr_end),
            ("train.weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        }
        for (name, v) in [("train.ema_start", self.ema_start), ("train.ema_end", self.ema_end)] {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.batch_size < 2 {
            return err(format!("train.batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.accum_steps == 0 {
            return err("train.accum_steps must be at least 1".into());
        }
        if self.epochs == 0 {
            return err("train.epochs must be at least 1".into());
        }
        if self.checkpoint_every == 0 {
            return err("train.checkpoint_every must be at least 1".into());
        }
        if let Some(c) = self.max_grad_norm {
            if !(c.is_finite() && c > 0.0) {
                return err(format!("train.max_grad_norm must be a finite positive number, got {c}"));
            }
        }
        self.mask.validate()?;
        self.weights.validate().map_err(TrainError::Config)?;
        Ok(())
    }
}

/// What one optimizer step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// 1-based index of the completed step.
    pub step: usize,
    pub losses: LossBreakdown,
    pub lr: f64,
    pub ema_momentum: f64,
}

/// Model plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub model: ModelState<T>,
    /// Momentum buffer per trainable tensor.
    pub momentum: Vec<Matrix<T>>,
    /// Completed optimizer steps.
    pub step: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: ModelState<T>) -> Self {
        let momentum = model.params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        TrainState { model, momentum, step: 0 }
    }

    pub fn in_phase1(&self, cfg: &TrainConfig) -> bool {
        self.step < cfg.phase1_steps
    }
}

/// `v <- mu * v + g; p <- p * (1 - lr * wd) - lr * v` for every tensor whose
/// learning rate is positive. Tensors with a zero rate are left untouched,
/// momentum included.
pub fn sgd_step<T: Scalar>(
    params: &mut [Matrix<T>],
    momentum: &mut [Matrix<T>],
    grads: &Grads<T>,
    lr: impl Fn(usize) -> f64,
    mu: f64,
    weight_decay: f64,
) {
    for (i, (p, v)) in params.iter_mut().zip(momentum.iter_mut()).enumerate() {
        let rate = lr(i);
        if rate == 0.0 {
            continue;
        }
        let mu_t = T::from_f64_lossy(mu);
        match grads.get(i) {
            Some(g) => {
                for (vv, &gg) in v.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *vv = mu_t * *vv + gg;
                }
            }
            None => v.scale(mu_t),
        }
        let decay = T::from_f64_lossy(1.0 - rate * weight_decay);
        let rate = T::from_f64_lossy(rate);
        for (pp, &vv) in p.as_mut_slice().iter_mut().zip(v.as_slice()) {
            *pp = *pp * decay - rate * vv;
        }
    }
}

/// L2 norm over every gradient tensor, accumulated in f64.
pub fn global_norm<T: Scalar>(grads: &Grads<T>) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.as_slice().iter())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// One optimizer step over `micro_batches` (one per accumulation slot):
/// average gradients, update with group learning rates, then move the
/// target encoder with the scheduled momentum.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    micro_batches: &[Vec<PreparedSample>],
    cfg: &TrainConfig,
    total_steps: usize,
    exec: Execution,
) -> Result<StepReport, TrainError> {
    let step = state.step;
    let frozen = state.in_phase1(cfg);
    let n = micro_batches.len().max(1) as f64;
    let mut grads = Grads::new(state.model.params.len());
    let mut sum = LossBreakdown::default();
    for mb in micro_batches {
        let out = batch_gradients(&state.model, mb, &cfg.weights, frozen, exec)?;
        sum.llm += out.losses.llm;
        sum.jepa += out.losses.jepa;
        sum.var += out.losses.var;
        sum.cov += out.losses.cov;
        grads.merge(out.grads);
    }
    let losses = crate::losses::total_loss(sum.llm / n, sum.jepa / n, sum.var / n, sum.cov / n, &cfg.weights);
    if !losses.total.is_finite() {
        return Err(TrainError::NonFinite {
            step: step + 1,
            what: "loss".into(),
        });
    }
    grads.scale(T::from_f64_lossy(1.0 / n));
    if let Some((i, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(TrainError::NonFinite {
            step: step + 1,
            what: format!("gradient of {}", state.model.layout.specs[i].name),
        });
    }
    if let Some(max) = cfg.max_grad_norm {
        let norm = global_norm(&grads);
        if norm > max {
            grads.scale(T::from_f64_lossy(max / norm));
        }
    }

    let layout = state.model.layout.clone();
    sgd_step(
        &mut state.model.params,
        &mut state.momentum,
        &grads,
        |i| group_lr(cfg, layout.group_of(i), step, total_steps),
        cfg.momentum,
        cfg.weight_decay,
    );
    let m = ema_momentum_at_step(cfg, step + 1, total_steps);
    state.model.ema_update(m)?;
    state.step += 1;
    Ok(StepReport {
        step: state.step,
        losses,
        lr: lr_at_step(cfg, step, total_steps),
        ema_momentum: m,
    })
}
