//! Contiguous span masking over token positions and re-masking of encoder
//! outputs.

use std::ops::Range;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Matrix, Scalar};
use crate::Objective;

/// Rejected placements before falling back to sequential packing.
const MAX_REJECTIONS: usize = 100;
const RATIO_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("no maskable positions")]
    EmptySequence,
    #[error("mask index {index} outside sequence of {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("hidden state has {rows} rows but the plan covers {tokens} tokens")]
    DimensionMismatch { rows: usize, tokens: usize },
    #[error("invalid mask config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub num_spans_min: usize,
    pub num_spans_max: usize,
    pub ratio_min: f64,
    pub ratio_max: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            num_spans_min: 1,
            num_spans_max: 3,
            ratio_min: 0.20,
            ratio_max: 0.40,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<(), MaskError> {
        if self.num_spans_min == 0 || self.num_spans_min > self.num_spans_max {
            return Err(MaskError::InvalidConfig(format!(
                "mask.num_spans_min/num_spans_max must satisfy 1 <= min <= max, got {}..{}",
                self.num_spans_min, self.num_spans_max
            )));
        }
        if !(self.ratio_min > 0.0 && self.ratio_min <= self.ratio_max && self.ratio_max <= 1.0) {
            return Err(MaskError::InvalidConfig(format!(
                "mask.ratio_min/ratio_max must satisfy 0 < min <= max <= 1, got {}..{}",
                self.ratio_min, self.ratio_max
            )));
        }
        Ok(())
    }
}

/// Sampled target spans for one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    n_tokens: usize,
    spans: Vec<(usize, usize)>,
    masked: Vec<usize>,
}

impl MaskPlan {
    /// A plan that masks nothing, used for the deterministic regularizer pass.
    pub fn empty(n_tokens: usize) -> Self {
        MaskPlan {
            n_tokens,
            spans: Vec::new(),
            masked: Vec::new(),
        }
    }

    /// Build a plan from explicit half-open spans.
    pub fn from_spans(n_tokens: usize, mut spans: Vec<(usize, usize)>) -> Result<Self, MaskError> {
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(MaskError::InvalidConfig(format!("spans {:?} and {:?} overlap", w[0], w[1])));
            }
        }
        let mut masked = Vec::new();
        for &(s, e) in &spans {
            if e > n_tokens || s >= e {
                return Err(MaskError::IndexOutOfRange { index: e, len: n_tokens });
            }
            masked.extend(s..e);
        }
        Ok(MaskPlan { n_tokens, spans, masked })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    /// Sorted masked token indices (the union of the spans).
    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }
}

/// Positions eligible for masking: everything except the aggregate token.
pub fn maskable_range(n_tokens: usize, objective: Objective) -> Range<usize> {
    match objective {
        Objective::Mlm => 1.min(n_tokens)..n_tokens,
        Objective::Ntp => 0..n_tokens.saturating_sub(1),
    }
}

/// Draw 1-3 (by default) contiguous spans covering 20-40% of the maskable
/// positions. The span count and target ratio are drawn uniformly; the
/// masked budget is split into positive span lengths by a uniform
/// composition and spans are placed at uniform non-overlapping positions,
/// falling back to random sequential packing after repeated collisions.
pub fn sample_spans<R: Rng + ?Sized>(
    n_tokens: usize,
    maskable: Range<usize>,
    rng: &mut R,
    cfg: &MaskConfig,
) -> Result<MaskPlan, MaskError> {
    cfg.validate()?;
    let len = maskable.len();
    if len == 0 {
        return Err(MaskError::EmptySequence);
    }
    if maskable.end > n_tokens {
        return Err(MaskError::IndexOutOfRange {
            index: maskable.end,
            len: n_tokens,
        });
    }
    let k = rng.gen_range(cfg.num_spans_min..=cfg.num_spans_max);
    let ratio = rng.gen_range(cfg.ratio_min..=cfg.ratio_max);
    let lf = len as f64;
    let lo = ((cfg.ratio_min * lf) - RATIO_SLACK).ceil() as usize;
    let hi = ((cfg.ratio_max * lf) + RATIO_SLACK).floor() as usize;
    let mut budget = ((ratio * lf) - RATIO_SLACK).ceil() as usize;
    if lo <= hi {
        budget = budget.clamp(lo, hi);
    }
    let budget = budget.clamp(1, len);
    let k = k.min(budget);

    let lengths = composition(rng, budget, k);
    let starts = place(rng, &lengths, len);
    let mut spans: Vec<(usize, usize)> = starts
        .iter()
        .zip(&lengths)
        .map(|(&s, &l)| (maskable.start + s, maskable.start + s + l))
        .collect();
    spans.sort_unstable();
    let masked = spans.iter().flat_map(|&(s, e)| s..e).collect();
    Ok(MaskPlan { n_tokens, spans, masked })
}

/// Uniform random composition of `total` into `parts` positive integers.
fn composition<R: Rng + ?Sized>(rng: &mut R, total: usize, parts: usize) -> Vec<usize> {
    if parts <= 1 {
        return vec![total];
    }
    let mut cuts: Vec<usize> = sample(rng, total - 1, parts - 1).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(total - prev);
    out
}

fn place<R: Rng + ?Sized>(rng: &mut R, lengths: &[usize], len: usize) -> Vec<usize> {
    'attempt: for _ in 0..MAX_REJECTIONS {
        let starts: Vec<usize> = lengths.iter().map(|&l| rng.gen_range(0..=len - l)).collect();
        for i in 0..starts.len() {
            for j in i + 1..starts.len() {
                let (a, b) = ((starts[i], starts[i] + lengths[i]), (starts[j], starts[j] + lengths[j]));
                if a.0 < b.1 && b.0 < a.1 {
                    continue 'attempt;
                }
            }
        }
        return starts;
    }
    // sequential packing with a uniform split of the free positions into gaps
    let free = len - lengths.iter().sum::<usize>();
    let gaps = composition(rng, free + lengths.len() + 1, lengths.len() + 1);
    let mut starts = Vec::with_capacity(lengths.len());
    let mut pos = 0;
    for (i, &l) in lengths.iter().enumerate() {
        pos += gaps[i] - 1;
        starts.push(pos);
        pos += l;
    }
    starts
}

/// Replace every masked position by `mask_id`; returns the masked ids and
/// the `(position, original id)` targets.
pub fn apply_token_mask(ids: &[u32], plan: &MaskPlan, mask_id: u32) -> Result<(Vec<u32>, Vec<(usize, u32)>), MaskError> {
    let mut out = ids.to_vec();
    let mut targets = Vec::with_capacity(plan.masked.len());
    for &i in &plan.masked {
        if i >= ids.len() {
            return Err(MaskError::IndexOutOfRange { index: i, len: ids.len() });
        }
        targets.push((i, ids[i]));
        out[i] = mask_id;
    }
    Ok((out, targets))
}

/// Copy of `hidden` with masked rows overwritten by `mask_embedding`.
pub fn remask_hidden<T: Scalar>(hidden: &Matrix<T>, plan: &MaskPlan, mask_embedding: &[T]) -> Result<Matrix<T>, MaskError> {
    if hidden.rows() != plan.n_tokens {
        return Err(MaskError::DimensionMismatch {
            rows: hidden.rows(),
            tokens: plan.n_tokens,
        });
    }
    if mask_embedding.len() != hidden.cols() {
        return Err(MaskError::DimensionMismatch {
            rows: mask_embedding.len(),
            tokens: hidden.cols(),
        });
    }
    let mut out = hidden.clone();
    for &r in &plan.masked {
        out.row_mut(r).copy_from_slice(mask_embedding);
    }
    Ok(out)
}
