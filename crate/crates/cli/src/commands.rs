use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use chrono::Utc;
use serde::Serialize;

use jepa_dna::eval::{self, read_task, LabeledPair, MetricReport, ZeroShotReport};
use jepa_dna::genomics_io::{self, chunk_record, generate_synthetic_corpus, parse_fasta, read_chunks, Chunk};
use jepa_dna::losses::LossWeights;
use jepa_dna::model::ModelState;
use jepa_dna::tokenizer::{train_bpe, train_bpe_on, TokenizerModel};
use jepa_dna::trainer::{self, grad_check, load_checkpoint, prepare_micro_batch, run_pretraining, RunOptions};
use jepa_dna::Objective;

use crate::config::RunConfig;
use crate::manifest::{sidecar, write_atomic, RunManifest};
use crate::{Global, NumericalFailure};

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

fn read_tokenizer(path: &Path) -> anyhow::Result<TokenizerModel> {
    TokenizerModel::read(open(path)?).with_context(|| format!("tokenizer {}", path.display()))
}

fn read_task_file(path: &Path) -> anyhow::Result<Vec<LabeledPair>> {
    read_task(open(path)?).with_context(|| format!("task file {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<ModelState<f32>> {
    let (_, state) = load_checkpoint(path).with_context(|| format!("checkpoint {}", path.display()))?;
    Ok(state.model)
}

fn json_line<T: Serialize>(value: &T) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Write `text` to `out`, or to stdout when no path is given.
fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

pub struct PrepareArgs {
    pub fasta: Vec<PathBuf>,
    pub synthetic: bool,
    pub out: PathBuf,
    pub labels: Option<PathBuf>,
    pub chunk_length: Option<usize>,
    pub overlap: Option<f64>,
    pub min_length: Option<usize>,
    pub n_sequences: Option<usize>,
    pub seq_len: Option<usize>,
    pub motifs: Vec<String>,
}

pub fn prepare(g: &Global, a: PrepareArgs) -> anyhow::Result<()> {
    let started = Utc::now();
    let mut cfg = RunConfig::load(g.config.as_deref())?;
    let seed = g.seed.unwrap_or(0);
    let mut artifacts = vec![a.out.clone()];
    let chunks: Vec<Chunk> = if a.synthetic {
        if !a.fasta.is_empty() {
            bail!("--synthetic and --fasta are mutually exclusive");
        }
        let spec = &mut cfg.synthetic;
        if let Some(n) = a.n_sequences {
            spec.n_sequences = n;
        }
        if let Some(l) = a.seq_len {
            spec.seq_len = l;
        }
        if !a.motifs.is_empty() {
            spec.motifs = a.motifs.clone();
        }
        let corpus = generate_synthetic_corpus(spec, seed)?;
        if let Some(path) = &a.labels {
            let pairs: Vec<LabeledPair> = corpus
                .records
                .iter()
                .zip(&corpus.labels)
                .map(|(r, &label)| LabeledPair {
                    ref_seq: r.seq.clone(),
                    alt_seq: None,
                    label,
                })
                .collect();
            let mut buf = b"seq\tlabel\n".to_vec();
            eval::write_task(&mut buf, &pairs)?;
            write_atomic(path, &buf)?;
            artifacts.push(path.clone());
        }
        corpus
            .records
            .into_iter()
            .map(|r| Chunk {
                source_id: r.id,
                start: 0,
                seq: r.seq,
            })
            .collect()
    } else {
        if a.fasta.is_empty() {
            bail!("prepare needs at least one --fasta file, or --synthetic");
        }
        if a.labels.is_some() {
            bail!("--labels applies only to --synthetic corpora");
        }
        let c = &mut cfg.chunk;
        if let Some(v) = a.chunk_length {
            c.chunk_length = v;
        }
        if let Some(v) = a.overlap {
            c.overlap_fraction = v;
        }
        if let Some(v) = a.min_length {
            c.min_chunk_length = v;
        }
        c.validate()?;
        let mut chunks = Vec::new();
        for path in &a.fasta {
            let records = parse_fasta(open(path)?).with_context(|| format!("FASTA {}", path.display()))?;
            for r in &records {
                chunks.extend(chunk_record(r, c)?);
            }
        }
        chunks
    };
    if chunks.is_empty() {
        bail!("no chunks produced; inputs hold no valid segment of at least the minimum length");
    }
    let mut buf = Vec::new();
    genomics_io::write_chunks(&mut buf, &chunks)?;
    write_atomic(&a.out, &buf)?;
    eprintln!("wrote {} chunks to {}", chunks.len(), a.out.display());
    RunManifest::new("prepare", cfg.hash(), seed, started, artifacts).write(&sidecar(&a.out))
}

pub fn train_tokenizer(g: &Global, corpus: &Path, vocab_size: usize, out: &Path) -> anyhow::Result<()> {
    let started = Utc::now();
    let cfg = RunConfig::load(g.config.as_deref())?;
    let seed = g.seed.unwrap_or(0);
    let chunks = read_chunks(open(corpus)?).with_context(|| format!("corpus {}", corpus.display()))?;
    let tok = train_bpe(&chunks, vocab_size, seed)?;
    write_atomic(out, tok.to_text().as_bytes())?;
    eprintln!("trained {} merges, vocab {}", tok.n_merges(), tok.vocab_size());
    RunManifest::new("train-tokenizer", cfg.hash(), seed, started, vec![out.to_path_buf()]).write(&sidecar(out))
}

pub struct PretrainArgs {
    pub corpus: PathBuf,
    pub tokenizer: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub stop_after: Option<usize>,
    pub log_every: usize,
}

pub fn pretrain(g: &Global, a: PretrainArgs) -> anyhow::Result<()> {
    let started = Utc::now();
    let mut cfg = RunConfig::load(g.config.as_deref())?;
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
    }
    let tok = read_tokenizer(&a.tokenizer)?;
    cfg.model.vocab_size = tok.vocab_size();
    cfg.model.validate().map_err(anyhow::Error::msg)?;
    cfg.train.validate()?;

    let chunks = read_chunks(open(&a.corpus)?).with_context(|| format!("corpus {}", a.corpus.display()))?;
    let corpus = chunks
        .iter()
        .map(|c| tok.encode(&c.seq, cfg.model.objective, cfg.model.max_tokens))
        .collect::<Result<Vec<_>, _>>()?;

    let mut opts = RunOptions::new(&a.out);
    opts.resume = a.resume.clone();
    opts.stop_after = a.stop_after;
    opts.exec = g.exec();
    let log_every = a.log_every.max(1);
    let outcome = run_pretraining(&cfg.model, &cfg.train, &corpus, &opts, |r| {
        if r.step % log_every == 0 || r.step == 1 {
            eprintln!(
                "step {} total {:.6} llm {:.4} jepa {:.4} var {:.4} cov {:.4} lr {:.3e}",
                r.step, r.losses.total, r.losses.llm, r.losses.jepa, r.losses.var, r.losses.cov, r.lr
            );
        }
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ trainer::TrainError::NonFinite { .. }) => {
            let last_good = a.out.join("last-good.ckpt");
            return Err(NumericalFailure(format!("{e}; last good state saved to {}", last_good.display())).into());
        }
        Err(e) => return Err(e.into()),
    };
    eprintln!(
        "{} {}/{} steps, checkpoint {}",
        if outcome.completed { "finished" } else { "stopped at" },
        outcome.state.step,
        outcome.total_steps,
        outcome.checkpoint.display()
    );
    let artifacts = vec![outcome.metrics_path, outcome.checkpoint, a.tokenizer];
    RunManifest::new("pretrain", cfg.hash(), cfg.train.seed, started, artifacts).write(&a.out.join("manifest.json"))
}

pub struct ProbeArgs {
    pub checkpoint: PathBuf,
    pub tokenizer: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub variant: bool,
    pub out: Option<PathBuf>,
    pub scores: Option<PathBuf>,
}

pub fn probe(g: &Global, a: ProbeArgs) -> anyhow::Result<()> {
    let started = Utc::now();
    let mut cfg = RunConfig::load(g.config.as_deref())?;
    if let Some(seed) = g.seed {
        cfg.probe.seed = seed;
    }
    let model = load_model(&a.checkpoint)?;
    let tok = read_tokenizer(&a.tokenizer)?;
    let train = read_task_file(&a.train)?;
    let test = read_task_file(&a.test)?;
    let outcome = eval::run_probe(&model, &tok, &train, &test, a.variant, &cfg.probe, g.exec())?;
    let report: &MetricReport = &outcome.report;
    emit(a.out.as_deref(), &json_line(report)?)?;
    let mut artifacts = Vec::new();
    if let Some(path) = &a.scores {
        let mut buf = Vec::new();
        eval::write_predictions(&mut buf, &outcome.scores)?;
        write_atomic(path, &buf)?;
        artifacts.push(path.clone());
    }
    if let Some(out) = &a.out {
        artifacts.insert(0, out.clone());
        RunManifest::new("probe", cfg.hash(), cfg.probe.seed, started, artifacts).write(&sidecar(out))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ZeroShotSummary {
    n_pairs: usize,
    /// `None` when the labels hold a single class.
    metrics: Option<ZeroShotReport>,
}

pub struct ZeroShotArgs {
    pub checkpoint: PathBuf,
    pub tokenizer: PathBuf,
    pub pairs: PathBuf,
    pub out: PathBuf,
    pub report: Option<PathBuf>,
}

pub fn zeroshot(g: &Global, a: ZeroShotArgs) -> anyhow::Result<()> {
    let started = Utc::now();
    let cfg = RunConfig::load(g.config.as_deref())?;
    let model = load_model(&a.checkpoint)?;
    let tok = read_tokenizer(&a.tokenizer)?;
    let pairs = read_task_file(&a.pairs)?;
    let scores = eval::zero_shot_scores(&model, &tok, &pairs, g.exec())?;
    let mut buf = Vec::new();
    eval::write_predictions(&mut buf, &scores)?;
    write_atomic(&a.out, &buf)?;

    let labels: Vec<u8> = pairs.iter().map(|p| p.label).collect();
    let metrics = match ZeroShotReport::from_scores(&scores, &labels) {
        Ok(r) => Some(r),
        Err(eval::EvalError::OneClassOnly) => {
            eprintln!("labels hold a single class; no ranking metrics");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let summary = ZeroShotSummary {
        n_pairs: pairs.len(),
        metrics,
    };
    emit(a.report.as_deref(), &json_line(&summary)?)?;
    let mut artifacts = vec![a.out.clone()];
    artifacts.extend(a.report.clone());
    RunManifest::new("zeroshot", cfg.hash(), g.seed.unwrap_or(0), started, artifacts).write(&sidecar(&a.out))
}

pub struct GradCheckArgs {
    pub objective: Objective,
    pub weights: String,
    pub coords: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub out: Option<PathBuf>,
}

pub fn gradcheck(g: &Global, a: GradCheckArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(g.config.as_deref())?;
    let seed = g.seed.unwrap_or(0);
    let mut model_cfg = if g.config.is_some() {
        cfg.model
    } else {
        jepa_dna::model::ModelConfig::tiny()
    };
    model_cfg.objective = a.objective;
    model_cfg.dropout_rate = 0.0;
    model_cfg.validate().map_err(anyhow::Error::msg)?;
    let weights = match a.weights.as_str() {
        "full" => LossWeights::default(),
        "mlm" => LossWeights {
            lambda_jepa: 0.0,
            lambda_var: 0.0,
            lambda_cov: 0.0,
            ..LossWeights::default()
        },
        "jepa" => LossWeights {
            lambda_llm: 0.0,
            lambda_var: 0.0,
            lambda_cov: 0.0,
            ..LossWeights::default()
        },
        "config" => cfg.train.weights,
        other => bail!("--weights must be full, mlm, jepa or config, got {other:?}"),
    };

    let spec = genomics_io::SyntheticSpec {
        seq_len: 40,
        n_sequences: 4,
        ..Default::default()
    };
    let synth = generate_synthetic_corpus(&spec, seed)?;
    let seqs: Vec<&str> = synth.records.iter().map(|r| r.seq.as_str()).collect();
    let tok = train_bpe_on(&seqs, model_cfg.vocab_size, seed)?;
    model_cfg.vocab_size = tok.vocab_size();
    let samples = seqs
        .iter()
        .map(|s| tok.encode(s, a.objective, model_cfg.max_tokens))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<_> = samples.iter().collect();
    let batch = prepare_micro_batch(&refs, a.objective, &cfg.train.mask, seed, 0, 0)?;
    let model = ModelState::<f64>::init(model_cfg, seed)?;
    let report = grad_check(&model, &batch, &weights, a.epsilon, a.coords, seed)?;
    emit(a.out.as_deref(), &json_line(&report)?)?;
    let worst = report.max_rel_err();
    if !(worst < a.tolerance) {
        return Err(NumericalFailure(format!(
            "gradient check failed: max relative error {worst:.3e} >= {}",
            a.tolerance
        ))
        .into());
    }
    eprintln!("gradient check passed: max relative error {worst:.3e}");
    Ok(())
}
