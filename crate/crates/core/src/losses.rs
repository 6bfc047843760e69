//! Objective terms: token recovery (masked or next-token), latent cosine
//! prediction, variance hinge and covariance decorrelation, plus their
//! weighted composition.
//!
//! Every term is evaluated with f64 accumulation regardless of the element
//! type, and the `*_grad` variants return the analytic gradient alongside the
//! value so the autograd tape and the batch-level regularizers share one
//! implementation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Matrix, Scalar};

/// Stabilizer added to the per-dimension variance before the square root.
pub const VARIANCE_EPS: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("no masked positions to score")]
    EmptyMask,
    #[error("sequence of length {0} is too short for next-token prediction")]
    SequenceTooShort(usize),
    #[error("cosine loss is undefined for a zero vector")]
    ZeroVector,
    #[error("batch of {0} rows is too small, need at least 2")]
    BatchTooSmall(usize),
    #[error("target position {index} outside {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("target id {id} outside vocabulary of {vocab}")]
    TargetOutOfVocab { id: u32, vocab: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// Mean softmax cross-entropy over `(row, target id)` pairs, and its gradient
/// with respect to every logit (rows without a target get zero gradient).
pub fn cross_entropy_rows_grad<T: Scalar>(
    logits: &Matrix<T>,
    targets: &[(usize, u32)],
) -> Result<(f64, Matrix<T>), LossError> {
    if targets.is_empty() {
        return Err(LossError::EmptyMask);
    }
    let vocab = logits.cols();
    let scale = 1.0 / targets.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), vocab);
    let mut total = 0.0;
    let mut probs = vec![0.0f64; vocab];
    for &(row, id) in targets {
        if row >= logits.rows() {
            return Err(LossError::IndexOutOfRange {
                index: row,
                len: logits.rows(),
            });
        }
        if id as usize >= vocab {
            return Err(LossError::TargetOutOfVocab { id, vocab });
        }
        let r = logits.row(row);
        let max = r.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let mut sum = 0.0;
        for (p, v) in probs.iter_mut().zip(r) {
            *p = (v.as_f64() - max).exp();
            sum += *p;
        }
        total += sum.ln() + max - r[id as usize].as_f64();
        let g = grad.row_mut(row);
        for (j, (gj, p)) in g.iter_mut().zip(&probs).enumerate() {
            let mut d = p / sum;
            if j == id as usize {
                d -= 1.0;
            }
            *gj = *gj + T::from_f64_lossy(d * scale);
        }
    }
    Ok((total * scale, grad))
}

/// Masked-token recovery loss: mean cross-entropy over the masked positions.
pub fn mlm_loss<T: Scalar>(logits: &Matrix<T>, targets: &[(usize, u32)]) -> Result<f64, LossError> {
    cross_entropy_rows_grad(logits, targets).map(|(v, _)| v)
}

/// Shift-by-one targets for next-token prediction: position `t` predicts
/// token `t + 1`. Positions whose own token or whose successor is padding are
/// skipped, and the final slot has no successor.
pub fn ntp_targets(ids: &[u32], pad_id: u32) -> Result<Vec<(usize, u32)>, LossError> {
    if ids.len() < 2 {
        return Err(LossError::SequenceTooShort(ids.len()));
    }
    Ok(ids
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] != pad_id && w[1] != pad_id)
        .map(|(t, w)| (t, w[1]))
        .collect())
}

/// Next-token prediction loss over a causal forward pass.
pub fn ntp_loss<T: Scalar>(logits: &Matrix<T>, ids: &[u32], pad_id: u32) -> Result<f64, LossError> {
    let targets = ntp_targets(ids, pad_id)?;
    if logits.rows() != ids.len() {
        return Err(LossError::DimensionMismatch(logits.rows(), ids.len()));
    }
    cross_entropy_rows_grad(logits, &targets).map(|(v, _)| v)
}

/// `1 - cos(pred, target)` with gradients for both arguments.
pub fn jepa_loss_grad<T: Scalar>(
    pred: &[T],
    target: &[T],
) -> Result<(f64, Vec<T>, Vec<T>), LossError> {
    if pred.len() != target.len() {
        return Err(LossError::DimensionMismatch(pred.len(), target.len()));
    }
    let dot: f64 = pred.iter().zip(target).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
    let na = pred.iter().map(|a| a.as_f64().powi(2)).sum::<f64>().sqrt();
    let nb = target.iter().map(|b| b.as_f64().powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(LossError::ZeroVector);
    }
    let cos = dot / (na * nb);
    let dpred = pred
        .iter()
        .zip(target)
        .map(|(a, b)| T::from_f64_lossy(-(b.as_f64() / (na * nb) - cos * a.as_f64() / (na * na))))
        .collect();
    let dtarget = pred
        .iter()
        .zip(target)
        .map(|(a, b)| T::from_f64_lossy(-(a.as_f64() / (na * nb) - cos * b.as_f64() / (nb * nb))))
        .collect();
    Ok((1.0 - cos, dpred, dtarget))
}

/// Latent prediction loss `1 - cos(pred, target)`, in `[0, 2]`.
pub fn jepa_loss<T: Scalar>(pred: &[T], target: &[T]) -> Result<f64, LossError> {
    jepa_loss_grad(pred, target).map(|(v, _, _)| v)
}

fn column_stats<T: Scalar>(z: &Matrix<T>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (b, d) = z.shape();
    let mut mean = vec![0.0; d];
    for r in 0..b {
        for (m, v) in mean.iter_mut().zip(z.row(r)) {
            *m += v.as_f64();
        }
    }
    for m in &mut mean {
        *m /= b as f64;
    }
    let centered = (0..b)
        .map(|r| z.row(r).iter().zip(&mean).map(|(v, m)| v.as_f64() - m).collect())
        .collect();
    (mean, centered)
}

/// Variance hinge `(1/d) sum_j max(0, gamma - sqrt(var_j + eps))` with the
/// unbiased batch variance, and its gradient with respect to `z`.
pub fn variance_loss_grad<T: Scalar>(z: &Matrix<T>, gamma: f64) -> Result<(f64, Matrix<T>), LossError> {
    let (b, d) = z.shape();
    if b < 2 {
        return Err(LossError::BatchTooSmall(b));
    }
    let (_, x) = column_stats(z);
    let denom = (b - 1) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(b, d);
    for j in 0..d {
        let var = x.iter().map(|row| row[j] * row[j]).sum::<f64>() / denom;
        let sigma = (var + VARIANCE_EPS).sqrt();
        if gamma > sigma {
            loss += gamma - sigma;
            let coef = -1.0 / (d as f64 * sigma * denom);
            for (r, row) in x.iter().enumerate() {
                grad.set(r, j, T::from_f64_lossy(coef * row[j]));
            }
        }
    }
    Ok((loss / d as f64, grad))
}

pub fn variance_loss<T: Scalar>(z: &Matrix<T>, gamma: f64) -> Result<f64, LossError> {
    variance_loss_grad(z, gamma).map(|(v, _)| v)
}

/// Off-diagonal covariance penalty `(1/d) sum_{i != j} C_ij^2` with
/// `C = (Z - mean)^T (Z - mean) / (B - 1)`, and its gradient.
pub fn covariance_loss_grad<T: Scalar>(z: &Matrix<T>) -> Result<(f64, Matrix<T>), LossError> {
    let (b, d) = z.shape();
    if b < 2 {
        return Err(LossError::BatchTooSmall(b));
    }
    let (_, x) = column_stats(z);
    let denom = (b - 1) as f64;
    let mut cov = vec![0.0f64; d * d];
    for row in &x {
        for i in 0..d {
            let xi = row[i];
            if xi == 0.0 {
                continue;
            }
            let c = &mut cov[i * d..(i + 1) * d];
            for (cj, xj) in c.iter_mut().zip(row) {
                *cj += xi * xj;
            }
        }
    }
    let mut loss = 0.0;
    for i in 0..d {
        cov[i * d + i] = 0.0;
        for j in 0..d {
            cov[i * d + j] /= denom;
            loss += cov[i * d + j] * cov[i * d + j];
        }
    }
    let coef = 4.0 / (d as f64 * denom);
    let mut grad = Matrix::zeros(b, d);
    for (r, row) in x.iter().enumerate() {
        for j in 0..d {
            let s: f64 = (0..d).map(|i| row[i] * cov[i * d + j]).sum();
            grad.set(r, j, T::from_f64_lossy(coef * s));
        }
    }
    Ok((loss / d as f64, grad))
}

pub fn covariance_loss<T: Scalar>(z: &Matrix<T>) -> Result<f64, LossError> {
    covariance_loss_grad(z).map(|(v, _)| v)
}

/// Weights of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_llm: f64,
    pub lambda_jepa: f64,
    pub lambda_var: f64,
    pub lambda_cov: f64,
    /// Target per-dimension standard deviation of the variance hinge.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_llm: 1.0,
            lambda_jepa: 1.0,
            lambda_var: 25.0,
            lambda_cov: 0.5,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("lambda_llm", self.lambda_llm),
            ("lambda_jepa", self.lambda_jepa),
            ("lambda_var", self.lambda_var),
            ("lambda_cov", self.lambda_cov),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("weights.{name} must be a finite non-negative number, got {v}"));
            }
        }
        Ok(())
    }

    pub fn needs_regularizers(&self) -> bool {
        self.lambda_var > 0.0 || self.lambda_cov > 0.0
    }
}

/// Unweighted objective terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub llm: f64,
    pub jepa: f64,
    pub var: f64,
    pub cov: f64,
    pub total: f64,
}

/// Weighted composition of the four terms.
pub fn total_loss(llm: f64, jepa: f64, var: f64, cov: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        llm,
        jepa,
        var,
        cov,
        total: w.lambda_llm * llm + w.lambda_jepa * jepa + w.lambda_var * var + w.lambda_cov * cov,
    }
}
