//! Linear probe on frozen features, trained with AdamW.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng;

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 3e-5,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

/// Softmax classifier `x -> softmax(x W + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub n_features: usize,
    pub n_classes: usize,
    /// Row-major `n_features x n_classes`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.weights[i * self.n_classes..(i + 1) * self.n_classes];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += f64::from(xi) * w;
            }
        }
        out
    }

    pub fn predict_proba(&self, x: &[f32]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        let l = self.logits(x);
        (0..l.len()).fold(0, |best, c| if l[c] > l[best] { c } else { best })
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Fit a softmax probe on `features` (one row per example) with mean
/// cross-entropy and AdamW (decoupled decay on the weights only). Weights
/// start at zero and mini-batches follow a per-epoch shuffle drawn from
/// `cfg.seed`.
pub fn train_linear_probe(features: &[Vec<f32>], labels: &[usize], cfg: &ProbeConfig) -> Result<LinearProbe, EvalError> {
    if features.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: features.len(),
            labels: labels.len(),
        });
    }
    if features.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if cfg.batch_size == 0 {
        return Err(EvalError::InvalidConfig("probe.batch_size must be at least 1".into()));
    }
    let k = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != k) {
        return Err(EvalError::FeatureWidth { expected: k, got: f.len() });
    }
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    let mut seen = vec![false; n_classes];
    labels.iter().for_each(|&l| seen[l] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(EvalError::DegenerateLabels);
    }

    let mut probe = LinearProbe {
        n_features: k,
        n_classes,
        weights: vec![0.0; k * n_classes],
        bias: vec![0.0; n_classes],
    };
    let n_w = probe.weights.len();
    let mut m = vec![0.0; n_w + n_classes];
    let mut v = vec![0.0; n_w + n_classes];
    let mut t = 0i32;
    let mut order: Vec<usize> = (0..features.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, "probe", &[epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            let mut g = vec![0.0; n_w + n_classes];
            for &i in batch {
                let mut p = probe.predict_proba(&features[i]);
                p[labels[i]] -= 1.0;
                for (f, &x) in features[i].iter().enumerate() {
                    for c in 0..n_classes {
                        g[f * n_classes + c] += f64::from(x) * p[c];
                    }
                }
                for c in 0..n_classes {
                    g[n_w + c] += p[c];
                }
            }
            let scale = 1.0 / batch.len() as f64;
            t += 1;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            for j in 0..n_w + n_classes {
                let gj = g[j] * scale;
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let step = cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
                if j < n_w {
                    let w = &mut probe.weights[j];
                    *w -= step + cfg.lr * cfg.weight_decay * *w;
                } else {
                    probe.bias[j - n_w] -= step;
                }
            }
        }
    }
    Ok(probe)
}
