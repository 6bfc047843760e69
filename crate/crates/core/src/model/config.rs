use serde::{Deserialize, Serialize};

use crate::tokenizer::MIN_VOCAB;
use crate::Objective;

/// Shape of the predictor head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub p_layers: usize,
    pub p_dim: usize,
    pub p_heads: usize,
    pub p_ff: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            p_layers: 3,
            p_dim: 96,
            p_heads: 3,
            p_ff: 384,
        }
    }
}

/// Encoder and predictor hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Longest token sequence, special tokens included.
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
    pub objective: Objective,
    pub predictor: PredictorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            max_tokens: 128,
            vocab_size: 512,
            dropout_rate: 0.1,
            objective: Objective::Mlm,
            predictor: PredictorConfig::default(),
        }
    }
}

impl ModelConfig {
    /// The small configuration used by gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_tokens: 48,
            vocab_size: 16,
            dropout_rate: 0.0,
            objective: Objective::Mlm,
            predictor: PredictorConfig {
                p_layers: 1,
                p_dim: 12,
                p_heads: 3,
                p_ff: 24,
            },
        }
    }

    /// Checks every structural invariant; the message names the offending
    /// field.
    pub fn validate(&self) -> Result<(), String> {
        let p = &self.predictor;
        let positive = [
            ("model.n_layers", self.n_layers),
            ("model.d_model", self.d_model),
            ("model.n_heads", self.n_heads),
            ("model.d_ff", self.d_ff),
            ("model.predictor.p_layers", p.p_layers),
            ("model.predictor.p_dim", p.p_dim),
            ("model.predictor.p_heads", p.p_heads),
            ("model.predictor.p_ff", p.p_ff),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(format!("{name} must be at least 1"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(format!(
                "model.n_heads ({}) must divide model.d_model ({})",
                self.n_heads, self.d_model
            ));
        }
        if p.p_dim % p.p_heads != 0 {
            return Err(format!(
                "model.predictor.p_heads ({}) must divide model.predictor.p_dim ({})",
                p.p_heads, p.p_dim
            ));
        }
        if self.max_tokens < 2 {
            return Err(format!("model.max_tokens must be at least 2, got {}", self.max_tokens));
        }
        if self.vocab_size < MIN_VOCAB {
            return Err(format!(
                "model.vocab_size must be at least {MIN_VOCAB}, got {}",
                self.vocab_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(format!("model.dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }
}
