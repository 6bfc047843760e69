//! Context encoder, EMA target encoder, predictor and MLM head.

mod checkpoint;
mod config;
pub mod graph;
mod layout;

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autograd::Tape;
use crate::masking::MaskPlan;
use crate::rng::{self, StreamRng};
use crate::tensor::{Matrix, Scalar};
use crate::Objective;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{ModelConfig, PredictorConfig};
pub use graph::{Bound, DropoutCtx};
pub use layout::{BlockIx, EncoderLayout, HeadLayout, Init, Layout, ParamGroup, ParamSpec, PredictorLayout};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_tokens {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfVocab { id: u32, vocab: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shape mismatch for tensor {name}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("missing tensor {0}")]
    MissingTensor(String),
}

/// Attention pattern of the encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attention {
    Bidirectional,
    Causal,
}

impl Attention {
    pub fn for_objective(objective: Objective) -> Self {
        match objective {
            Objective::Mlm => Attention::Bidirectional,
            Objective::Ntp => Attention::Causal,
        }
    }
}

/// Row holding the sequence summary: `[CLS]` at 0 for MLM, the trailing
/// `[EOS]` (last non-pad row) for NTP.
pub fn aggregate_index(valid: Option<&[bool]>, n_tokens: usize, objective: Objective) -> usize {
    match objective {
        Objective::Mlm => 0,
        Objective::Ntp => match valid {
            Some(v) => v.iter().rposition(|&ok| ok).unwrap_or(0),
            None => n_tokens.saturating_sub(1),
        },
    }
}

/// The summary row of `hidden`.
pub fn aggregate<T: Scalar>(hidden: &Matrix<T>, valid: Option<&[bool]>, objective: Objective) -> Vec<T> {
    hidden.row(aggregate_index(valid, hidden.rows(), objective)).to_vec()
}

/// `theta_bar <- m * theta_bar + (1 - m) * theta`, elementwise.
pub fn ema_update<T: Scalar>(theta_bar: &mut [Matrix<T>], theta: &[Matrix<T>], m: f64) -> Result<(), ModelError> {
    if theta_bar.len() != theta.len() {
        return Err(ModelError::DimensionMismatch(format!(
            "{} target tensors vs {} online tensors",
            theta_bar.len(),
            theta.len()
        )));
    }
    for (i, (tb, t)) in theta_bar.iter().zip(theta).enumerate() {
        if tb.shape() != t.shape() {
            return Err(ModelError::ShapeMismatch {
                name: format!("tensor {i}"),
                expected: tb.shape(),
                got: t.shape(),
            });
        }
    }
    if m == 0.0 {
        theta_bar.clone_from_slice(theta);
        return Ok(());
    }
    // written as an increment so that theta_bar == theta is a fixed point
    let step = T::from_f64_lossy(1.0 - m);
    for (tb, t) in theta_bar.iter_mut().zip(theta) {
        for (a, &b) in tb.as_mut_slice().iter_mut().zip(t.as_slice()) {
            *a = *a + step * (b - *a);
        }
    }
    Ok(())
}

/// All model parameters. `params` holds the trainable tensors (encoder,
/// predictor, MLM head, in layout order); `target` mirrors the encoder part
/// and is only ever changed by [`ModelState::ema_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<Matrix<T>>,
    pub target: Vec<Matrix<T>>,
    sinusoid: Matrix<T>,
}

impl<T: Scalar> ModelState<T> {
    /// Fresh parameters: truncated-normal weights and embeddings, zero
    /// biases, unit layer-norm gains; the target encoder is an exact copy.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate().map_err(ModelError::InvalidConfig)?;
        let layout = Layout::new(&config);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params: Vec<Matrix<T>> = layout
            .specs
            .iter()
            .enumerate()
            .map(|(i, s)| match s.init {
                Init::Zeros => Matrix::zeros(s.rows, s.cols),
                Init::Ones => Matrix::filled(s.rows, s.cols, T::one()),
                Init::TruncNormal => {
                    let mut r = rng::stream(seed, "init", &[i as u64]);
                    let data = (0..s.rows * s.cols)
                        .map(|_| loop {
                            let v: f64 = normal.sample(&mut r);
                            if v.abs() <= 2.0 * INIT_STD {
                                break T::from_f64_lossy(v);
                            }
                        })
                        .collect();
                    Matrix::from_vec(s.rows, s.cols, data)
                }
            })
            .collect();
        let target = params[layout.encoder_range.clone()].to_vec();
        let sinusoid = graph::sinusoid_table(config.max_tokens, config.predictor.p_dim);
        Ok(ModelState {
            config,
            layout,
            params,
            target,
            sinusoid,
        })
    }

    /// Same parameters in another precision.
    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config,
            layout: self.layout.clone(),
            params: self.params.iter().map(Matrix::cast).collect(),
            target: self.target.iter().map(Matrix::cast).collect(),
            sinusoid: self.sinusoid.cast(),
        }
    }

    pub fn encoder_params(&self) -> &[Matrix<T>] {
        &self.params[self.layout.encoder_range.clone()]
    }

    pub fn predictor_params(&self) -> &[Matrix<T>] {
        &self.params[self.layout.predictor_range.clone()]
    }

    pub fn head_params(&self) -> &[Matrix<T>] {
        &self.params[self.layout.head_range.clone()]
    }

    /// The frozen predictor positional table.
    pub fn sinusoid(&self) -> &Matrix<T> {
        &self.sinusoid
    }

    pub fn n_scalars(&self) -> usize {
        self.layout.n_scalars()
    }

    /// Rejects sequences the encoder cannot consume.
    pub fn check_input(&self, ids: &[u32], valid: Option<&[bool]>) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if ids.len() > self.config.max_tokens {
            return Err(ModelError::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_tokens,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfVocab {
                id,
                vocab: self.config.vocab_size,
            });
        }
        if let Some(v) = valid {
            if v.len() != ids.len() {
                return Err(ModelError::DimensionMismatch(format!(
                    "pad mask has {} entries for {} tokens",
                    v.len(),
                    ids.len()
                )));
            }
            if !v.iter().any(|&ok| ok) {
                return Err(ModelError::EmptySequence);
            }
        }
        Ok(())
    }

    fn dropout<'r>(&self, rng: Option<&'r mut StreamRng>) -> Option<DropoutCtx<'r>> {
        rng.map(|rng| DropoutCtx {
            rate: self.config.dropout_rate,
            rng,
        })
    }

    /// Context-encoder hidden states, `L x d`. `valid[i] == false` marks a
    /// pad; passing a dropout generator selects train mode.
    pub fn encoder_forward(
        &self,
        ids: &[u32],
        valid: Option<&[bool]>,
        attention: Attention,
        dropout_rng: Option<&mut StreamRng>,
    ) -> Result<Matrix<T>, ModelError> {
        self.check_input(ids, valid)?;
        let mut tape = Tape::new();
        let mut drop = self.dropout(dropout_rng);
        let h = graph::encoder(
            &mut tape,
            &self.config,
            &self.layout.encoder,
            Bound::frozen(self.encoder_params()),
            ids,
            valid,
            attention,
            &mut drop,
        );
        Ok(tape.value(h).clone())
    }

    /// Eval-mode summary vector from the context encoder.
    pub fn embed(&self, ids: &[u32], valid: Option<&[bool]>) -> Result<Vec<T>, ModelError> {
        let objective = self.config.objective;
        let h = self.encoder_forward(ids, valid, Attention::for_objective(objective), None)?;
        Ok(aggregate(&h, valid, objective))
    }

    /// Target summary from the EMA encoder over the unmasked input; always
    /// eval mode.
    pub fn target_forward(&self, ids: &[u32], valid: Option<&[bool]>) -> Result<Vec<T>, ModelError> {
        self.check_input(ids, valid)?;
        let objective = self.config.objective;
        let mut tape = Tape::new();
        let h = graph::encoder(
            &mut tape,
            &self.config,
            &self.layout.encoder,
            Bound::frozen(&self.target),
            ids,
            valid,
            Attention::for_objective(objective),
            &mut None,
        );
        Ok(aggregate(tape.value(h), valid, objective))
    }

    /// Predicted target summary from context hidden states and a plan.
    pub fn predictor_forward(
        &self,
        context: &Matrix<T>,
        plan: &MaskPlan,
        valid: Option<&[bool]>,
        dropout_rng: Option<&mut StreamRng>,
    ) -> Result<Vec<T>, ModelError> {
        let (l, d) = context.shape();
        if d != self.config.d_model {
            return Err(ModelError::DimensionMismatch(format!(
                "context width {d}, expected {}",
                self.config.d_model
            )));
        }
        if l == 0 || l > self.config.max_tokens {
            return Err(ModelError::SequenceTooLong {
                len: l,
                max: self.config.max_tokens,
            });
        }
        if plan.n_tokens() != l || valid.is_some_and(|v| v.len() != l) {
            return Err(ModelError::DimensionMismatch(format!(
                "plan covers {} tokens, context has {l}",
                plan.n_tokens()
            )));
        }
        let mut tape = Tape::new();
        let ctx = tape.constant(context);
        let mut drop = self.dropout(dropout_rng);
        let agg = aggregate_index(valid, l, self.config.objective);
        let z = graph::predictor(
            &mut tape,
            &self.config,
            &self.layout.predictor,
            Bound::frozen(self.predictor_params()),
            &self.sinusoid,
            ctx,
            plan,
            valid,
            agg,
            &mut drop,
        );
        Ok(tape.value(z).row(0).to_vec())
    }

    /// Vocabulary logits for every row of `hidden`.
    pub fn mlm_logits(&self, hidden: &Matrix<T>) -> Result<Matrix<T>, ModelError> {
        if hidden.cols() != self.config.d_model {
            return Err(ModelError::DimensionMismatch(format!(
                "hidden width {}, expected {}",
                hidden.cols(),
                self.config.d_model
            )));
        }
        let mut tape = Tape::new();
        let h = tape.constant(hidden);
        let out = graph::mlm_head(&mut tape, &self.layout.head, Bound::frozen(self.head_params()), h);
        Ok(tape.value(out).clone())
    }

    /// Moves the target encoder toward the context encoder with momentum `m`.
    pub fn ema_update(&mut self, m: f64) -> Result<(), ModelError> {
        let range = self.layout.encoder_range.clone();
        ema_update(&mut self.target, &self.params[range], m)
    }

    /// Every tensor with a stable name: `theta.*`, `phi.*`, `head.*` for the
    /// trainable parts and `theta_bar.*` for the target encoder.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::with_capacity(self.params.len() + self.target.len());
        for (i, (spec, m)) in self.layout.specs.iter().zip(&self.params).enumerate() {
            let tag = match self.layout.group_of(i) {
                ParamGroup::Encoder => "theta",
                ParamGroup::Predictor => "phi",
                ParamGroup::MlmHead => "head",
            };
            out.push((format!("{tag}.{}", spec.name), m));
        }
        for (spec, m) in self.layout.specs.iter().zip(&self.target) {
            out.push((format!("theta_bar.{}", spec.name), m));
        }
        out
    }

    /// Rebuild a state from named tensors as produced by
    /// [`ModelState::named_tensors`].
    pub fn from_named(config: ModelConfig, tensors: &HashMap<String, Matrix<T>>) -> Result<Self, ModelError> {
        let mut state = Self::init(config, 0)?;
        let names: Vec<String> = state.named_tensors().into_iter().map(|(n, _)| n).collect();
        let n_params = state.params.len();
        for (i, name) in names.into_iter().enumerate() {
            let m = tensors.get(&name).ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            let slot = if i < n_params {
                &mut state.params[i]
            } else {
                &mut state.target[i - n_params]
            };
            if slot.shape() != m.shape() {
                return Err(ModelError::ShapeMismatch {
                    name,
                    expected: slot.shape(),
                    got: m.shape(),
                });
            }
            *slot = m.clone();
        }
        Ok(state)
    }
}
