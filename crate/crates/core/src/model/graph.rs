//! Tape builders for the encoder, the predictor and the MLM head.
//!
//! Each builder takes the weights of its part as a slice plus an optional
//! gradient-slot base. With a base the weights enter the tape as trainable
//! leaves at `base + local index`; without one they enter as constants,
//! which is how the target encoder is bound.

use rand::Rng;

use crate::autograd::{AttentionMask, NodeId, Tape};
use crate::masking::MaskPlan;
use crate::rng::StreamRng;
use crate::tensor::{Matrix, Scalar};

use super::layout::{BlockIx, EncoderLayout, HeadLayout, PredictorLayout};
use super::{Attention, ModelConfig};

pub const LN_EPS: f64 = 1e-5;

/// Weights of one model part and how they bind to the tape.
#[derive(Clone, Copy)]
pub struct Bound<'a, T> {
    pub weights: &'a [Matrix<T>],
    pub slot_base: Option<usize>,
}

impl<'a, T: Scalar> Bound<'a, T> {
    pub fn trainable(weights: &'a [Matrix<T>], slot_base: usize) -> Self {
        Bound {
            weights,
            slot_base: Some(slot_base),
        }
    }

    pub fn frozen(weights: &'a [Matrix<T>]) -> Self {
        Bound { weights, slot_base: None }
    }

    fn get(&self, tape: &mut Tape<'a, T>, ix: usize) -> NodeId {
        match self.slot_base {
            Some(base) => tape.param(base + ix, &self.weights[ix]),
            None => tape.constant(&self.weights[ix]),
        }
    }
}

/// Dropout state for train mode; `None` means eval mode.
pub struct DropoutCtx<'r> {
    pub rate: f64,
    pub rng: &'r mut StreamRng,
}

fn maybe_dropout<T: Scalar>(tape: &mut Tape<'_, T>, x: NodeId, drop: &mut Option<DropoutCtx<'_>>) -> NodeId {
    match drop {
        Some(ctx) if ctx.rate > 0.0 => {
            let n = tape.value(x).len();
            let keep: Vec<bool> = (0..n).map(|_| ctx.rng.gen::<f64>() >= ctx.rate).collect();
            tape.dropout(x, &keep, ctx.rate)
        }
        _ => x,
    }
}

#[allow(clippy::too_many_arguments)]
fn block<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    w: &Bound<'a, T>,
    ix: &BlockIx,
    x: NodeId,
    heads: usize,
    mask: AttentionMask<'_>,
    drop: &mut Option<DropoutCtx<'_>>,
) -> NodeId {
    let (g1, b1) = (w.get(tape, ix.ln1_g), w.get(tape, ix.ln1_b));
    let h = tape.layer_norm(x, g1, b1, LN_EPS);
    let (wq, bq) = (w.get(tape, ix.wq), w.get(tape, ix.bq));
    let (wk, bk) = (w.get(tape, ix.wk), w.get(tape, ix.bk));
    let (wv, bv) = (w.get(tape, ix.wv), w.get(tape, ix.bv));
    let q = tape.linear(h, wq, Some(bq));
    let k = tape.linear(h, wk, Some(bk));
    let v = tape.linear(h, wv, Some(bv));
    let a = tape.attention(q, k, v, heads, mask);
    let (wo, bo) = (w.get(tape, ix.wo), w.get(tape, ix.bo));
    let o = tape.linear(a, wo, Some(bo));
    let o = maybe_dropout(tape, o, drop);
    let x = tape.add(x, o);

    let (g2, b2) = (w.get(tape, ix.ln2_g), w.get(tape, ix.ln2_b));
    let h = tape.layer_norm(x, g2, b2, LN_EPS);
    let (w1, c1) = (w.get(tape, ix.w1), w.get(tape, ix.b1));
    let f = tape.linear(h, w1, Some(c1));
    let f = tape.gelu(f);
    let (w2, c2) = (w.get(tape, ix.w2), w.get(tape, ix.b2));
    let f = tape.linear(f, w2, Some(c2));
    let f = maybe_dropout(tape, f, drop);
    tape.add(x, f)
}

fn attention_mask<'m>(kind: Attention, valid: Option<&'m [bool]>) -> AttentionMask<'m> {
    match kind {
        Attention::Bidirectional => AttentionMask::Bidirectional { key_valid: valid },
        Attention::Causal => AttentionMask::Causal { key_valid: valid },
    }
}

/// Rows that are padding, given the validity mask.
pub(crate) fn pad_rows(valid: Option<&[bool]>) -> Vec<usize> {
    valid.map_or_else(Vec::new, |v| {
        v.iter().enumerate().filter(|(_, &ok)| !ok).map(|(i, _)| i).collect()
    })
}

/// Encoder over `ids`; returns the `L x d` hidden node with pad rows zeroed.
#[allow(clippy::too_many_arguments)]
pub fn encoder<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    cfg: &ModelConfig,
    layout: &EncoderLayout,
    w: Bound<'a, T>,
    ids: &[u32],
    valid: Option<&[bool]>,
    kind: Attention,
    drop: &mut Option<DropoutCtx<'_>>,
) -> NodeId {
    let tok = w.get(tape, layout.tok_emb);
    let pos = w.get(tape, layout.pos_emb);
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..ids.len()).collect();
    let te = tape.gather(tok, &idx);
    let pe = tape.gather(pos, &positions);
    let mut x = tape.add(te, pe);
    x = maybe_dropout(tape, x, drop);
    let mask = attention_mask(kind, valid);
    for b in &layout.blocks {
        x = block(tape, &w, b, x, cfg.n_heads, mask, drop);
    }
    let (g, b) = (w.get(tape, layout.lnf_g), w.get(tape, layout.lnf_b));
    x = tape.layer_norm(x, g, b, LN_EPS);
    let pads = pad_rows(valid);
    if pads.is_empty() {
        x
    } else {
        tape.zero_rows(x, &pads)
    }
}

/// Predictor from context hidden states to the `1 x d` predicted summary.
#[allow(clippy::too_many_arguments)]
pub fn predictor<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    cfg: &ModelConfig,
    layout: &PredictorLayout,
    w: Bound<'a, T>,
    sinusoid: &'a Matrix<T>,
    context: NodeId,
    plan: &MaskPlan,
    valid: Option<&[bool]>,
    aggregate_row: usize,
    drop: &mut Option<DropoutCtx<'_>>,
) -> NodeId {
    let len = tape.value(context).rows();
    let (iw, ib) = (w.get(tape, layout.in_w), w.get(tape, layout.in_b));
    let mut x = tape.linear(context, iw, Some(ib));
    if !plan.is_empty() {
        let m = w.get(tape, layout.mask_emb);
        x = tape.replace_rows(x, plan.masked(), m);
    }
    let table = tape.constant(sinusoid);
    let positions: Vec<usize> = (0..len).collect();
    let pe = tape.gather(table, &positions);
    x = tape.add(x, pe);
    let mask = attention_mask(Attention::Bidirectional, valid);
    for b in &layout.blocks {
        x = block(tape, &w, b, x, cfg.predictor.p_heads, mask, drop);
    }
    let (g, b) = (w.get(tape, layout.lnf_g), w.get(tape, layout.lnf_b));
    x = tape.layer_norm(x, g, b, LN_EPS);
    let agg = tape.select_rows(x, &[aggregate_row]);
    let (ow, ob) = (w.get(tape, layout.out_w), w.get(tape, layout.out_b));
    tape.linear(agg, ow, Some(ob))
}

/// Per-position vocabulary logits, `L x vocab`.
pub fn mlm_head<'a, T: Scalar>(tape: &mut Tape<'a, T>, layout: &HeadLayout, w: Bound<'a, T>, hidden: NodeId) -> NodeId {
    let (hw, hb) = (w.get(tape, layout.w), w.get(tape, layout.b));
    tape.linear(hidden, hw, Some(hb))
}

/// Frozen sinusoidal table, `rows x dim`.
pub fn sinusoid_table<T: Scalar>(rows: usize, dim: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(rows, dim);
    for pos in 0..rows {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            m.set(pos, i, T::from_f64_lossy(v));
        }
    }
    m
}
