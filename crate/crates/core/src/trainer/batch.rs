//! Per-batch composition of masking, forward passes, losses and gradients.

use rand::SeedableRng;

use crate::autograd::{Grads, NodeId, Tape};
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::masking::{self, MaskConfig, MaskPlan};
use crate::model::graph::{self, Bound, DropoutCtx};
use crate::model::{self, Attention, ModelState};
use crate::par::{self, Execution};
use crate::rng::{self, StreamRng};
use crate::tensor::{Matrix, Scalar};
use crate::tokenizer::{self, TokenizedSample, MASK_ID, PAD_ID};
use crate::Objective;

use super::TrainError;

/// Samples handled by one accumulation buffer. Fixed so that the reduction
/// order, and hence the result, is independent of the thread count.
const CHUNK: usize = 4;

/// One training sample after truncation and mask sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub ids: Vec<u32>,
    pub plan: MaskPlan,
    pub dropout_seed: u64,
}

/// Truncate a micro-batch to its shortest member and draw a mask plan and a
/// dropout seed per sample from streams keyed by `(step, micro, sample)`.
pub fn prepare_micro_batch(
    samples: &[&TokenizedSample],
    objective: Objective,
    mask: &MaskConfig,
    seed: u64,
    step: usize,
    micro: usize,
) -> Result<Vec<PreparedSample>, TrainError> {
    let min_len = samples.iter().map(|s| s.content_len()).min().unwrap_or(0);
    if min_len == 0 {
        return Err(TrainError::EmptySample);
    }
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let key = [step as u64, micro as u64, i as u64];
            let ids = tokenizer::truncate_content(s, min_len, objective).ids;
            let n = ids.len();
            let mut r = rng::stream(seed, "mask", &key);
            let plan = masking::sample_spans(n, masking::maskable_range(n, objective), &mut r, mask)?;
            Ok(PreparedSample {
                ids,
                plan,
                dropout_seed: rng::derive_seed(seed, "dropout", &key),
            })
        })
        .collect()
}

/// Loss terms, gradients and the regularizer embeddings of one micro-batch.
#[derive(Debug, Clone)]
pub struct BatchOutput<T> {
    pub losses: LossBreakdown,
    pub grads: Grads<T>,
    /// Eval-mode summaries from the context encoder, one row per sample.
    pub z_ctx: Matrix<T>,
    /// Eval-mode predictor outputs on the unmasked input.
    pub z_pred: Matrix<T>,
}

struct Binding<'a, T> {
    encoder: Bound<'a, T>,
    predictor: Bound<'a, T>,
    head: Bound<'a, T>,
}

impl<'a, T: Scalar> Binding<'a, T> {
    fn new(model: &'a ModelState<T>, freeze_encoder: bool) -> Self {
        let l = &model.layout;
        let (encoder, head) = if freeze_encoder {
            (Bound::frozen(model.encoder_params()), Bound::frozen(model.head_params()))
        } else {
            (
                Bound::trainable(model.encoder_params(), l.encoder_range.start),
                Bound::trainable(model.head_params(), l.head_range.start),
            )
        };
        Binding {
            encoder,
            predictor: Bound::trainable(model.predictor_params(), l.predictor_range.start),
            head,
        }
    }
}

fn seed_1x1<T: Scalar>(v: f64) -> Matrix<T> {
    Matrix::from_vec(1, 1, vec![T::from_f64_lossy(v)])
}

/// Train-mode pass over the masked sample: token loss and latent loss.
/// Returns the unweighted values and accumulates the weighted gradients.
fn train_pass<'a, T: Scalar>(
    model: &'a ModelState<T>,
    bind: &Binding<'a, T>,
    sample: &PreparedSample,
    target: &[T],
    seed_scale: (f64, f64),
    grads: &mut Grads<T>,
) -> Result<(f64, f64), TrainError> {
    let cfg = &model.config;
    let layout = &model.layout;
    let objective = cfg.objective;
    let attention = Attention::for_objective(objective);
    let (masked_ids, mlm_targets) = masking::apply_token_mask(&sample.ids, &sample.plan, MASK_ID)?;
    let mut r = StreamRng::seed_from_u64(sample.dropout_seed);
    let mut drop = Some(DropoutCtx {
        rate: cfg.dropout_rate,
        rng: &mut r,
    });
    let mut tape = Tape::new();

    let (llm, context) = match objective {
        Objective::Mlm => {
            let h = graph::encoder(&mut tape, cfg, &layout.encoder, bind.encoder, &masked_ids, None, attention, &mut drop);
            let logits = graph::mlm_head(&mut tape, &layout.head, bind.head, h);
            (tape.cross_entropy(logits, &mlm_targets)?, h)
        }
        Objective::Ntp => {
            let full = graph::encoder(&mut tape, cfg, &layout.encoder, bind.encoder, &sample.ids, None, attention, &mut drop);
            let logits = graph::mlm_head(&mut tape, &layout.head, bind.head, full);
            let targets = losses::ntp_targets(&sample.ids, PAD_ID)?;
            let llm = tape.cross_entropy(logits, &targets)?;
            let h = graph::encoder(&mut tape, cfg, &layout.encoder, bind.encoder, &masked_ids, None, attention, &mut drop);
            (llm, h)
        }
    };
    let agg = model::aggregate_index(None, sample.ids.len(), objective);
    let z_hat = graph::predictor(
        &mut tape,
        cfg,
        &layout.predictor,
        bind.predictor,
        model.sinusoid(),
        context,
        &sample.plan,
        None,
        agg,
        &mut drop,
    );
    let zt = tape.constant_owned(Matrix::row_vector(target));
    let jepa = tape.cosine_loss(z_hat, zt)?;

    let mut seeds = Vec::new();
    for (node, w) in [(llm, seed_scale.0), (jepa, seed_scale.1)] {
        if w != 0.0 && tape.requires_grad(node) {
            seeds.push((node, seed_1x1::<T>(w)));
        }
    }
    if !seeds.is_empty() {
        tape.backward(&seeds, grads);
    }
    Ok((tape.value(llm).get(0, 0).as_f64(), tape.value(jepa).get(0, 0).as_f64()))
}

/// Eval-mode pass over the unmasked sample producing the two summary rows
/// used by the regularizers.
fn regularizer_graph<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    model: &'a ModelState<T>,
    bind: &Binding<'a, T>,
    ids: &[u32],
) -> (NodeId, NodeId) {
    let cfg = &model.config;
    let layout = &model.layout;
    let objective = cfg.objective;
    let h = graph::encoder(
        tape,
        cfg,
        &layout.encoder,
        bind.encoder,
        ids,
        None,
        Attention::for_objective(objective),
        &mut None,
    );
    let agg = model::aggregate_index(None, ids.len(), objective);
    let z_ctx = tape.select_rows(h, &[agg]);
    let plan = MaskPlan::empty(ids.len());
    let z_pred = graph::predictor(
        tape,
        cfg,
        &layout.predictor,
        bind.predictor,
        model.sinusoid(),
        h,
        &plan,
        None,
        agg,
        &mut None,
    );
    (z_ctx, z_pred)
}

fn stack_rows<T: Scalar>(rows: &[Vec<T>]) -> Matrix<T> {
    Matrix::from_rows(rows)
}

/// Loss values and gradients of the composite objective over one
/// micro-batch. With `freeze_encoder` the encoder and MLM head enter every
/// graph as constants, so only the predictor is differentiated.
pub fn batch_gradients<T: Scalar>(
    model: &ModelState<T>,
    batch: &[PreparedSample],
    weights: &LossWeights,
    freeze_encoder: bool,
    exec: Execution,
) -> Result<BatchOutput<T>, TrainError> {
    let b = batch.len();
    if b < 2 {
        return Err(TrainError::Loss(losses::LossError::BatchTooSmall(b)));
    }
    let bind = Binding::new(model, freeze_encoder);

    // forward-only values: latent targets and regularizer rows
    let rows = par::map_slice(exec, batch, |s| -> Result<_, TrainError> {
        let target = model.target_forward(&s.ids, None)?;
        let mut tape = Tape::new();
        let (zc, zp) = regularizer_graph(&mut tape, model, &bind, &s.ids);
        Ok((target, tape.value(zc).row(0).to_vec(), tape.value(zp).row(0).to_vec()))
    });
    let mut targets = Vec::with_capacity(b);
    let mut ctx_rows = Vec::with_capacity(b);
    let mut pred_rows = Vec::with_capacity(b);
    for r in rows {
        let (t, c, p) = r?;
        targets.push(t);
        ctx_rows.push(c);
        pred_rows.push(p);
    }
    let z_ctx = stack_rows(&ctx_rows);
    let z_pred = stack_rows(&pred_rows);

    let (var_c, dvar_c) = losses::variance_loss_grad(&z_ctx, weights.gamma)?;
    let (var_p, dvar_p) = losses::variance_loss_grad(&z_pred, weights.gamma)?;
    let (cov_c, dcov_c) = losses::covariance_loss_grad(&z_ctx)?;
    let (cov_p, dcov_p) = losses::covariance_loss_grad(&z_pred)?;
    let regularize = weights.needs_regularizers();
    let reg_seed = |dv: &Matrix<T>, dc: &Matrix<T>| -> Matrix<T> {
        let (lv, lc) = (0.5 * weights.lambda_var, 0.5 * weights.lambda_cov);
        let data = dv
            .as_slice()
            .iter()
            .zip(dc.as_slice())
            .map(|(&v, &c)| T::from_f64_lossy(lv * v.as_f64() + lc * c.as_f64()))
            .collect();
        Matrix::from_vec(dv.rows(), dv.cols(), data)
    };
    let seed_ctx = reg_seed(&dvar_c, &dcov_c);
    let seed_pred = reg_seed(&dvar_p, &dcov_p);

    let scale = (weights.lambda_llm / b as f64, weights.lambda_jepa / b as f64);
    let n_chunks = b.div_ceil(CHUNK);
    let n_params = model.params.len();
    let chunks = par::map_indexed(exec, n_chunks, |c| -> Result<_, TrainError> {
        let mut grads = Grads::new(n_params);
        let mut values = Vec::new();
        for i in c * CHUNK..((c + 1) * CHUNK).min(b) {
            let s = &batch[i];
            values.push(train_pass(model, &bind, s, &targets[i], scale, &mut grads)?);
            if regularize {
                let mut tape = Tape::new();
                let (zc, zp) = regularizer_graph(&mut tape, model, &bind, &s.ids);
                let mut seeds = Vec::new();
                for (node, m) in [(zc, &seed_ctx), (zp, &seed_pred)] {
                    if tape.requires_grad(node) {
                        seeds.push((node, Matrix::row_vector(m.row(i))));
                    }
                }
                tape.backward(&seeds, &mut grads);
            }
        }
        Ok((values, grads))
    });

    let mut grads = Grads::new(n_params);
    let (mut llm, mut jepa) = (0.0, 0.0);
    for c in chunks {
        let (values, g) = c?;
        for (l, j) in values {
            llm += l;
            jepa += j;
        }
        grads.merge(g);
    }
    let losses = losses::total_loss(
        llm / b as f64,
        jepa / b as f64,
        0.5 * (var_c + var_p),
        0.5 * (cov_c + cov_p),
        weights,
    );
    Ok(BatchOutput {
        losses,
        grads,
        z_ctx,
        z_pred,
    })
}

/// Mean over dimensions of the per-dimension standard deviation (unbiased)
/// of the rows of `z`.
pub fn mean_feature_std<T: Scalar>(z: &Matrix<T>) -> f64 {
    let (b, d) = z.shape();
    if b < 2 || d == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..b).map(|i| z.get(i, j).as_f64()).sum::<f64>() / b as f64;
        let var = (0..b).map(|i| (z.get(i, j).as_f64() - mean).powi(2)).sum::<f64>() / (b - 1) as f64;
        total += var.sqrt();
    }
    total / d as f64
}
