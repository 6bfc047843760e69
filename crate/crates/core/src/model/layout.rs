//! Flat parameter layout. Trainable tensors live in one vector ordered
//! encoder, predictor, MLM head; the structs below hold indices into it.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Truncated normal, std 0.02, cut at two standard deviations.
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

/// Which optimizer group a trainable tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Predictor,
    MlmHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Encoder, ParamGroup::Predictor, ParamGroup::MlmHead];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Predictor => "predictor",
            ParamGroup::MlmHead => "mlm_head",
        }
    }
}

/// Indices of one pre-norm Transformer block, relative to its owner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockIx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderLayout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub blocks: Vec<BlockIx>,
    pub lnf_g: usize,
    pub lnf_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictorLayout {
    pub in_w: usize,
    pub in_b: usize,
    pub mask_emb: usize,
    pub blocks: Vec<BlockIx>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadLayout {
    pub w: usize,
    pub b: usize,
}

/// Complete layout: per-part indices (relative to the part's first tensor)
/// plus the spec of every trainable tensor in global order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub encoder: EncoderLayout,
    pub predictor: PredictorLayout,
    pub head: HeadLayout,
    pub specs: Vec<ParamSpec>,
    pub encoder_range: Range<usize>,
    pub predictor_range: Range<usize>,
    pub head_range: Range<usize>,
}

struct Builder {
    specs: Vec<ParamSpec>,
    base: usize,
    prefix: String,
}

impl Builder {
    fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push(ParamSpec {
            name: format!("{}.{name}", self.prefix),
            rows,
            cols,
            init,
        });
        self.specs.len() - 1 - self.base
    }

    fn block(&mut self, l: usize, d: usize, ff: usize) -> BlockIx {
        let n = |s: &str| format!("layers.{l}.{s}");
        BlockIx {
            ln1_g: self.add(&n("ln1.gain"), 1, d, Init::Ones),
            ln1_b: self.add(&n("ln1.bias"), 1, d, Init::Zeros),
            wq: self.add(&n("attn.wq"), d, d, Init::TruncNormal),
            bq: self.add(&n("attn.bq"), 1, d, Init::Zeros),
            wk: self.add(&n("attn.wk"), d, d, Init::TruncNormal),
            bk: self.add(&n("attn.bk"), 1, d, Init::Zeros),
            wv: self.add(&n("attn.wv"), d, d, Init::TruncNormal),
            bv: self.add(&n("attn.bv"), 1, d, Init::Zeros),
            wo: self.add(&n("attn.wo"), d, d, Init::TruncNormal),
            bo: self.add(&n("attn.bo"), 1, d, Init::Zeros),
            ln2_g: self.add(&n("ln2.gain"), 1, d, Init::Ones),
            ln2_b: self.add(&n("ln2.bias"), 1, d, Init::Zeros),
            w1: self.add(&n("ff.w1"), d, ff, Init::TruncNormal),
            b1: self.add(&n("ff.b1"), 1, ff, Init::Zeros),
            w2: self.add(&n("ff.w2"), ff, d, Init::TruncNormal),
            b2: self.add(&n("ff.b2"), 1, d, Init::Zeros),
        }
    }

    fn start(&mut self, prefix: &str) {
        self.base = self.specs.len();
        self.prefix = prefix.to_string();
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let p = cfg.predictor.p_dim;
        let mut b = Builder {
            specs: Vec::new(),
            base: 0,
            prefix: String::new(),
        };

        b.start("encoder");
        let encoder = EncoderLayout {
            tok_emb: b.add("tok_emb", cfg.vocab_size, d, Init::TruncNormal),
            pos_emb: b.add("pos_emb", cfg.max_tokens, d, Init::TruncNormal),
            blocks: (0..cfg.n_layers).map(|l| b.block(l, d, cfg.d_ff)).collect(),
            lnf_g: b.add("ln_f.gain", 1, d, Init::Ones),
            lnf_b: b.add("ln_f.bias", 1, d, Init::Zeros),
        };
        let encoder_range = 0..b.specs.len();

        b.start("predictor");
        let predictor = PredictorLayout {
            in_w: b.add("in_proj.w", d, p, Init::TruncNormal),
            in_b: b.add("in_proj.b", 1, p, Init::Zeros),
            mask_emb: b.add("mask_emb", 1, p, Init::TruncNormal),
            blocks: (0..cfg.predictor.p_layers).map(|l| b.block(l, p, cfg.predictor.p_ff)).collect(),
            lnf_g: b.add("ln_f.gain", 1, p, Init::Ones),
            lnf_b: b.add("ln_f.bias", 1, p, Init::Zeros),
            out_w: b.add("out_proj.w", p, d, Init::TruncNormal),
            out_b: b.add("out_proj.b", 1, d, Init::Zeros),
        };
        let predictor_range = encoder_range.end..b.specs.len();

        b.start("mlm_head");
        let head = HeadLayout {
            w: b.add("w", d, cfg.vocab_size, Init::TruncNormal),
            b: b.add("b", 1, cfg.vocab_size, Init::Zeros),
        };
        let head_range = predictor_range.end..b.specs.len();

        Layout {
            encoder,
            predictor,
            head,
            specs: b.specs,
            encoder_range,
            predictor_range,
            head_range,
        }
    }

    pub fn range(&self, group: ParamGroup) -> Range<usize> {
        match group {
            ParamGroup::Encoder => self.encoder_range.clone(),
            ParamGroup::Predictor => self.predictor_range.clone(),
            ParamGroup::MlmHead => self.head_range.clone(),
        }
    }

    pub fn group_of(&self, index: usize) -> ParamGroup {
        if self.encoder_range.contains(&index) {
            ParamGroup::Encoder
        } else if self.predictor_range.contains(&index) {
            ParamGroup::Predictor
        } else {
            ParamGroup::MlmHead
        }
    }

    pub fn n_params(&self) -> usize {
        self.specs.len()
    }

    pub fn n_scalars(&self) -> usize {
        self.specs.iter().map(|s| s.rows * s.cols).sum()
    }
}
