//! Ranking and classification metrics.

use serde::{Deserialize, Serialize};

use super::EvalError;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(EvalError::InvalidScore(i));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(EvalError::InvalidLabel(u32::from(l)));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((n_pos, labels.len() - n_pos))
}

/// Area under the ROC curve: the probability that a random positive
/// outscores a random negative, ties counting one half. Computed from
/// doubled integer midranks, so the only rounding is the final division.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    let (n_pos, n_neg) = check_inputs(scores, labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::OneClassOnly);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum over positives of twice their 1-based midrank
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share the midrank (i + j + 2) / 2
        let mid2 = (i + j + 2) as u128;
        let pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank2_sum += mid2 * pos;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let u2 = rank2_sum - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Average precision: the mean, over positives taken in descending score
/// order, of the precision at each positive's rank. Equal scores keep their
/// input order.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    let (n_pos, _) = check_inputs(scores, labels)?;
    if n_pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if labels[k] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

/// Matthews correlation coefficient of binary predictions; 0 when any
/// marginal of the confusion matrix is empty.
pub fn mcc(pred: &[u8], truth: &[u8]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            scores: pred.len(),
            labels: truth.len(),
        });
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => tp += 1,
            (0, 0) => tn += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => return Err(EvalError::InvalidLabel(u32::from(p.max(t)))),
        }
    }
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0) {
        return Ok(0.0);
    }
    let num = tp as f64 * tn as f64 - fp as f64 * fn_ as f64;
    let den = factors.iter().map(|&f| f as f64).product::<f64>().sqrt();
    Ok(num / den)
}

/// Metrics of a binary classifier on held-out data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub auprc: f64,
    pub mcc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl MetricReport {
    /// Metrics from positive-class scores; predictions are `score >= threshold`.
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self, EvalError> {
        let pred: Vec<u8> = scores.iter().map(|&s| u8::from(s >= threshold)).collect();
        let n_pos = labels.iter().filter(|&&l| l == 1).count();
        Ok(MetricReport {
            auroc: auroc(scores, labels)?,
            auprc: auprc(scores, labels)?,
            mcc: mcc(&pred, labels)?,
            n_pos,
            n_neg: labels.len() - n_pos,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.3], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.0);
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(EvalError::OneClassOnly)));
        assert!(matches!(auroc(&[f64::NAN, 0.2], &[1, 0]), Err(EvalError::InvalidScore(0))));
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.8, 0.3], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(auprc(&[0.9, 0.1, 0.3], &[1, 0, 0]).unwrap(), 1.0);
        // positives ranked last of four: (1/3 + 2/4) / 2
        assert_eq!(auprc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap(), (1.0 / 3.0 + 2.0 / 4.0) / 2.0);
        // equal scores keep input order
        assert_eq!(auprc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
        assert!(matches!(auprc(&[0.5], &[0]), Err(EvalError::NoPositives)));
    }

    #[test]
    fn mcc_examples() {
        assert_eq!(mcc(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap(), 1.0);
        assert_eq!(mcc(&[1, 1, 1, 1], &[1, 0, 1, 0]).unwrap(), 0.0);
        let mut pred = vec![1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        let truth = vec![1, 1, 1, 0, 1, 1, 0, 0, 0, 0];
        let expected = (3.0 * 4.0 - 1.0 * 2.0) / (4.0f64 * 5.0 * 5.0 * 6.0).sqrt();
        assert_eq!(mcc(&pred, &truth).unwrap(), expected);
        pred.iter_mut().for_each(|p| *p = 1 - *p);
        let swapped: Vec<u8> = truth.iter().map(|t| 1 - t).collect();
        assert_eq!(mcc(&pred, &swapped).unwrap(), expected);
    }
}
