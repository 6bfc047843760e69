//! Latent-predictive pre-training for genomic sequence encoders: a context
//! encoder, an EMA target encoder and a predictor trained jointly with
//! masked-token recovery, plus frozen-feature evaluation.

use serde::{Deserialize, Serialize};

pub mod autograd;
pub mod eval;
pub mod genomics_io;
pub mod losses;
pub mod masking;
pub mod model;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

/// Token-level generative objective paired with the latent objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Masked-token recovery with bidirectional attention; `[CLS]` in front.
    #[default]
    Mlm,
    /// Next-token prediction with causal attention; `[EOS]` appended.
    Ntp,
}
