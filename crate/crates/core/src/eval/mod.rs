//! Frozen-encoder evaluation: embedding extraction, linear probing,
//! zero-shot variant scoring and metrics.

mod metrics;
mod probe;

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelState};
use crate::par::{self, Execution};
use crate::tokenizer::{TokenizerError, TokenizerModel};

pub use metrics::{auprc, auroc, mcc, MetricReport};
pub use probe::{train_linear_probe, LinearProbe, ProbeConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("both classes are required, only one is present")]
    OneClassOnly,
    #[error("no positive labels")]
    NoPositives,
    #[error("labels contain a single class, nothing to probe")]
    DegenerateLabels,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score {0} is NaN")]
    InvalidScore(usize),
    #[error("label {0} is not 0 or 1")]
    InvalidLabel(u32),
    #[error("feature rows must all have {expected} values, found {got}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("no examples")]
    EmptyInput,
    #[error("{0}")]
    InvalidConfig(String),
    #[error("cosine distance is undefined for a zero embedding")]
    ZeroVector,
    #[error("example {0} has no variant sequence")]
    MissingVariant(usize),
    #[error("task file line {line}: {reason}")]
    MalformedTask { line: usize, reason: String },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One evaluation example: a sequence, or a reference/variant pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPair {
    pub ref_seq: String,
    pub alt_seq: Option<String>,
    pub label: u8,
}

/// Read a task file: `ref_seq[<TAB>alt_seq]<TAB>label` per line. Blank lines
/// and a leading header whose last field is `label` are skipped; every row
/// must have the same number of columns.
pub fn read_task<R: BufRead>(reader: R) -> Result<Vec<LabeledPair>, EvalError> {
    let mut out = Vec::new();
    let mut width = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if out.is_empty() && width.is_none() && fields.last() == Some(&"label") {
            width = Some(fields.len());
            continue;
        }
        let bad = |reason: String| EvalError::MalformedTask { line: i + 1, reason };
        if !(2..=3).contains(&fields.len()) {
            return Err(bad(format!("expected 2 or 3 tab-separated fields, found {}", fields.len())));
        }
        if *width.get_or_insert(fields.len()) != fields.len() {
            return Err(bad("column count differs from earlier rows".into()));
        }
        let label = match fields[fields.len() - 1].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("label must be 0 or 1, got {other:?}"))),
        };
        if fields[0].is_empty() || (fields.len() == 3 && fields[1].is_empty()) {
            return Err(bad("empty sequence".into()));
        }
        out.push(LabeledPair {
            ref_seq: fields[0].to_string(),
            alt_seq: (fields.len() == 3).then(|| fields[1].to_string()),
            label,
        });
    }
    if out.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(out)
}

pub fn write_task<W: Write>(mut out: W, pairs: &[LabeledPair]) -> std::io::Result<()> {
    for p in pairs {
        match &p.alt_seq {
            Some(alt) => writeln!(out, "{}\t{}\t{}", p.ref_seq, alt, p.label)?,
            None => writeln!(out, "{}\t{}", p.ref_seq, p.label)?,
        }
    }
    Ok(())
}

/// `index<TAB>score` per row.
pub fn write_predictions<W: Write>(mut out: W, scores: &[f64]) -> std::io::Result<()> {
    writeln!(out, "index\tscore")?;
    for (i, s) in scores.iter().enumerate() {
        writeln!(out, "{i}\t{s}")?;
    }
    Ok(())
}

/// Summary vector of one sequence from the frozen context encoder. Lowercase
/// bases are accepted; sequences longer than the model window keep their
/// central tokens.
pub fn extract_embedding(model: &ModelState<f32>, tokenizer: &TokenizerModel, seq: &str) -> Result<Vec<f32>, EvalError> {
    let seq = seq.to_ascii_uppercase();
    let sample = tokenizer.encode(&seq, model.config.objective, model.config.max_tokens)?;
    Ok(model.embed(&sample.ids, None)?)
}

pub fn extract_embeddings<S: AsRef<str> + Sync>(
    model: &ModelState<f32>,
    tokenizer: &TokenizerModel,
    seqs: &[S],
    exec: Execution,
) -> Result<Vec<Vec<f32>>, EvalError> {
    par::map_slice(exec, seqs, |s| extract_embedding(model, tokenizer, s.as_ref()))
        .into_iter()
        .collect()
}

/// Probe features: the reference embedding, followed by the variant
/// embedding for pair tasks (`ref || alt`).
pub fn probe_features(
    model: &ModelState<f32>,
    tokenizer: &TokenizerModel,
    pairs: &[LabeledPair],
    exec: Execution,
) -> Result<Vec<Vec<f32>>, EvalError> {
    par::map_slice(exec, pairs, |p| -> Result<Vec<f32>, EvalError> {
        let mut f = extract_embedding(model, tokenizer, &p.ref_seq)?;
        if let Some(alt) = &p.alt_seq {
            f.extend(extract_embedding(model, tokenizer, alt)?);
        }
        Ok(f)
    })
    .into_iter()
    .collect()
}

/// `1 - cos(a, b)` accumulated in f64. For `a == b` the result is exactly 0.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> Result<f64, EvalError> {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    let cos = (dot / (na * nb).sqrt()).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

/// Zero-shot disruption score of a variant: cosine distance between the
/// reference and variant embeddings, higher meaning more disruptive.
pub fn zero_shot_score(
    model: &ModelState<f32>,
    tokenizer: &TokenizerModel,
    ref_seq: &str,
    alt_seq: &str,
) -> Result<f64, EvalError> {
    let a = extract_embedding(model, tokenizer, ref_seq)?;
    let b = extract_embedding(model, tokenizer, alt_seq)?;
    cosine_distance(&a, &b)
}

/// Zero-shot scores of every pair, in order. Every pair needs a variant.
pub fn zero_shot_scores(
    model: &ModelState<f32>,
    tokenizer: &TokenizerModel,
    pairs: &[LabeledPair],
    exec: Execution,
) -> Result<Vec<f64>, EvalError> {
    if let Some(i) = pairs.iter().position(|p| p.alt_seq.is_none()) {
        return Err(EvalError::MissingVariant(i));
    }
    par::map_slice(exec, pairs, |p| {
        zero_shot_score(model, tokenizer, &p.ref_seq, p.alt_seq.as_deref().unwrap_or_default())
    })
    .into_iter()
    .collect()
}

/// Result of fitting a probe on one split and scoring another.
#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub probe: LinearProbe,
    /// Positive-class probability per test example.
    pub scores: Vec<f64>,
    pub report: MetricReport,
}

/// Fit a linear probe on frozen features of `train` and evaluate it on
/// `test`. With `variant` set, features are `ref || alt` and every example
/// must carry a variant; otherwise only the reference is embedded.
pub fn run_probe(
    model: &ModelState<f32>,
    tokenizer: &TokenizerModel,
    train: &[LabeledPair],
    test: &[LabeledPair],
    variant: bool,
    cfg: &ProbeConfig,
    exec: Execution,
) -> Result<ProbeOutcome, EvalError> {
    let prep = |pairs: &[LabeledPair]| -> Result<Vec<LabeledPair>, EvalError> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, p)| match (variant, &p.alt_seq) {
                (true, None) => Err(EvalError::MissingVariant(i)),
                (true, Some(_)) => Ok(p.clone()),
                (false, _) => Ok(LabeledPair { alt_seq: None, ..p.clone() }),
            })
            .collect()
    };
    let (train, test) = (prep(train)?, prep(test)?);
    let x_train = probe_features(model, tokenizer, &train, exec)?;
    let y_train: Vec<usize> = train.iter().map(|p| usize::from(p.label)).collect();
    let probe = train_linear_probe(&x_train, &y_train, cfg)?;
    let x_test = probe_features(model, tokenizer, &test, exec)?;
    let scores: Vec<f64> = x_test.iter().map(|x| probe.predict_proba(x)[1]).collect();
    let labels: Vec<u8> = test.iter().map(|p| p.label).collect();
    let report = MetricReport::from_scores(&scores, &labels, 0.5)?;
    Ok(ProbeOutcome { probe, scores, report })
}

/// Which score direction the oriented metrics use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Higher distance predicts the positive class.
    Distance,
    /// Higher similarity predicts the positive class.
    Similarity,
}

/// Zero-shot ranking quality. `auroc_raw` treats the distance as the
/// positive-class score; the oriented figures use whichever direction is
/// better, recorded in `polarity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub auroc_raw: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub polarity: Polarity,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl ZeroShotReport {
    pub fn from_scores(scores: &[f64], labels: &[u8]) -> Result<Self, EvalError> {
        let raw = auroc(scores, labels)?;
        let (polarity, oriented): (Polarity, Vec<f64>) = if raw >= 0.5 {
            (Polarity::Distance, scores.to_vec())
        } else {
            (Polarity::Similarity, scores.iter().map(|s| -s).collect())
        };
        let n_pos = labels.iter().filter(|&&l| l == 1).count();
        Ok(ZeroShotReport {
            auroc_raw: raw,
            auroc: raw.max(1.0 - raw),
            auprc: auprc(&oriented, labels)?,
            polarity,
            n_pos,
            n_neg: labels.len() - n_pos,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_files() {
        let text = "ref_seq\tlabel\nACGT\t1\n\nTTGA\t0\n";
        let t = read_task(text.as_bytes()).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].alt_seq, None);
        let pairs = read_task("ACGT\tACGA\t1\nAAAA\tAAAT\t0\n".as_bytes()).unwrap();
        assert_eq!(pairs[0].alt_seq.as_deref(), Some("ACGA"));
        let mut buf = Vec::new();
        write_task(&mut buf, &pairs).unwrap();
        assert_eq!(read_task(&buf[..]).unwrap(), pairs);
        assert!(matches!(
            read_task("ACGT\t2\n".as_bytes()),
            Err(EvalError::MalformedTask { line: 1, .. })
        ));
        assert!(matches!(
            read_task("ACGT\t1\nAC\tAG\t0\n".as_bytes()),
            Err(EvalError::MalformedTask { line: 2, .. })
        ));
    }

    #[test]
    fn cosine_distance_edges() {
        let a = [0.3f32, -1.7, 2.2, 0.01];
        assert_eq!(cosine_distance(&a, &a).unwrap(), 0.0);
        let b = [1.0f32, 0.0, 0.0, 0.0];
        assert_eq!(cosine_distance(&a, &b).unwrap(), cosine_distance(&b, &a).unwrap());
        let neg: Vec<f32> = b.iter().map(|v| -v).collect();
        assert_eq!(cosine_distance(&b, &neg).unwrap(), 2.0);
        assert!(matches!(cosine_distance(&[0.0, 0.0], &b[..2]), Err(EvalError::ZeroVector)));
    }

    #[test]
    fn zero_shot_polarity() {
        let r = ZeroShotReport::from_scores(&[0.1, 0.2, 0.9], &[1, 1, 0]).unwrap();
        assert_eq!(r.auroc_raw, 0.0);
        assert_eq!(r.auroc, 1.0);
        assert_eq!(r.polarity, Polarity::Similarity);
        assert_eq!(r.auprc, 1.0);
    }
}
