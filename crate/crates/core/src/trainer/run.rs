//! The pre-training loop: deterministic data order, metrics log,
//! checkpoints and exact resumption.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::model::{Checkpoint, ModelConfig, ModelError, ModelState};
use crate::par::Execution;
use crate::rng;
use crate::tensor::Matrix;
use crate::tokenizer::TokenizedSample;

use super::{prepare_micro_batch, train_step, StepReport, TrainConfig, TrainError, TrainState};

pub const METRICS_COLUMNS: &str = "step\tllm\tjepa\tvar\tcov\ttotal\tlr\tema_m";
const CHECKPOINT_FORMAT: &str = "jepa-dna-train/1";

/// Optimizer steps in a run: whole batches per epoch, times epochs, grouped
/// into accumulation windows.
pub fn total_steps(n_samples: usize, cfg: &TrainConfig) -> usize {
    (n_samples / cfg.batch_size) * cfg.epochs / cfg.accum_steps
}

/// Order-sensitive fingerprint of the tokenized corpus.
pub fn corpus_digest(corpus: &[TokenizedSample]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: u64| {
        for b in v.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for s in corpus {
        eat(s.ids.len() as u64);
        for &id in &s.ids {
            eat(u64::from(id));
        }
    }
    format!("{h:016x}")
}

/// Metadata stored alongside the tensors of a training checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub step: usize,
    pub total_steps: usize,
    pub n_samples: usize,
    pub corpus_digest: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) once this many steps are complete.
    pub stop_after: Option<usize>,
    pub exec: Execution,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            out_dir: out_dir.into(),
            resume: None,
            stop_after: None,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub state: TrainState<f32>,
    pub total_steps: usize,
    /// Whether every scheduled step ran.
    pub completed: bool,
    pub last: Option<StepReport>,
    pub metrics_path: PathBuf,
    /// Most recent checkpoint written by this call.
    pub checkpoint: PathBuf,
}

fn checkpoint_of(state: &TrainState<f32>, meta: &CheckpointMeta) -> Result<Checkpoint, TrainError> {
    let mut tensors: Vec<(String, Matrix<f32>)> =
        state.model.named_tensors().into_iter().map(|(n, m)| (n, m.clone())).collect();
    for (spec, m) in state.model.layout.specs.iter().zip(&state.momentum) {
        tensors.push((format!("momentum.{}", spec.name), m.clone()));
    }
    Ok(Checkpoint {
        meta: serde_json::to_string(meta)?,
        tensors,
    })
}

/// Read a training checkpoint back into its metadata and state.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, TrainState<f32>), TrainError> {
    let ck = Checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&ck.meta)?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(TrainError::ResumeMismatch(format!("unknown checkpoint format {}", meta.format)));
    }
    let map: HashMap<String, Matrix<f32>> = ck.tensors.into_iter().collect();
    let model = ModelState::from_named(meta.model, &map)?;
    let momentum = model
        .layout
        .specs
        .iter()
        .map(|s| {
            let name = format!("momentum.{}", s.name);
            match map.get(&name) {
                Some(m) if m.shape() == (s.rows, s.cols) => Ok(m.clone()),
                Some(m) => Err(ModelError::ShapeMismatch {
                    name,
                    expected: (s.rows, s.cols),
                    got: m.shape(),
                }),
                None => Err(ModelError::MissingTensor(name)),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((
        meta.clone(),
        TrainState {
            model,
            momentum,
            step: meta.step,
        },
    ))
}

fn check_resume(meta: &CheckpointMeta, expected: &CheckpointMeta) -> Result<(), TrainError> {
    let mismatch = |what: &str| Err(TrainError::ResumeMismatch(format!("{what} differs from the checkpoint")));
    if meta.model != expected.model {
        return mismatch("model config");
    }
    let mut a = meta.train;
    a.checkpoint_every = expected.train.checkpoint_every;
    if a != expected.train {
        return mismatch("training config");
    }
    if meta.n_samples != expected.n_samples || meta.corpus_digest != expected.corpus_digest {
        return mismatch("corpus");
    }
    if meta.total_steps != expected.total_steps || meta.step > meta.total_steps {
        return mismatch("step budget");
    }
    Ok(())
}

fn format_row(r: &StepReport) -> String {
    let l = &r.losses;
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
        r.step, l.llm, l.jepa, l.var, l.cov, l.total, r.lr, r.ema_momentum
    )
}

/// Keep the header and the rows of steps `<= step`.
fn truncate_log(path: &Path, step: usize, header: &str) -> Result<(), TrainError> {
    let mut kept = String::from(header);
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.starts_with("step")) {
            match line.split('\t').next().and_then(|s| s.parse::<usize>().ok()) {
                Some(s) if s <= step => {
                    kept.push_str(line);
                    kept.push('\n');
                }
                _ => {}
            }
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

fn check_corpus(corpus: &[TokenizedSample], model: &ModelConfig) -> Result<(), TrainError> {
    for s in corpus {
        if s.ids.len() > model.max_tokens {
            return Err(ModelError::SequenceTooLong {
                len: s.ids.len(),
                max: model.max_tokens,
            }
            .into());
        }
        if let Some(&id) = s.ids.iter().find(|&&id| id as usize >= model.vocab_size) {
            return Err(ModelError::TokenOutOfVocab {
                id,
                vocab: model.vocab_size,
            }
            .into());
        }
        if s.content_len() == 0 {
            return Err(TrainError::EmptySample);
        }
    }
    Ok(())
}

/// Pre-train from scratch (or from `opts.resume`) over `corpus`, writing
/// `metrics.tsv`, periodic checkpoints under `checkpoints/` and
/// `final.ckpt` into `opts.out_dir`. `on_step` sees every completed step.
pub fn run_pretraining(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    corpus: &[TokenizedSample],
    opts: &RunOptions,
    mut on_step: impl FnMut(&StepReport),
) -> Result<RunOutcome, TrainError> {
    cfg.validate()?;
    model_cfg.validate().map_err(TrainError::Config)?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    check_corpus(corpus, model_cfg)?;
    let total = total_steps(corpus.len(), cfg);
    if total == 0 {
        return Err(TrainError::TooFewSamples {
            samples: corpus.len(),
            batch: cfg.batch_size,
            accum: cfg.accum_steps,
        });
    }
    let mut meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        step: 0,
        total_steps: total,
        n_samples: corpus.len(),
        corpus_digest: corpus_digest(corpus),
        model: *model_cfg,
        train: *cfg,
    };

    fs::create_dir_all(opts.out_dir.join("checkpoints"))?;
    let metrics_path = opts.out_dir.join("metrics.tsv");
    let header = format!("# total_steps={total}\n{METRICS_COLUMNS}\n");
    let mut state = match &opts.resume {
        Some(path) => {
            let (ck_meta, state) = load_checkpoint(path)?;
            check_resume(&ck_meta, &meta)?;
            truncate_log(&metrics_path, state.step, &header)?;
            state
        }
        None => {
            fs::write(&metrics_path, &header)?;
            TrainState::new(ModelState::init(*model_cfg, cfg.seed)?)
        }
    };
    let mut log = fs::OpenOptions::new().append(true).open(&metrics_path)?;

    let per_epoch = corpus.len() / cfg.batch_size;
    let mut order: Option<(usize, Vec<usize>)> = None;
    let stop = opts.stop_after.unwrap_or(total).min(total);
    let mut last = None;
    let mut checkpoint = opts.resume.clone().unwrap_or_default();

    while state.step < stop {
        let step = state.step;
        let mut micro_batches = Vec::with_capacity(cfg.accum_steps);
        for k in 0..cfg.accum_steps {
            let g = step * cfg.accum_steps + k;
            let (epoch, j) = (g / per_epoch, g % per_epoch);
            if order.as_ref().map_or(true, |(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..corpus.len()).collect();
                perm.shuffle(&mut rng::stream(cfg.seed, "shuffle", &[epoch as u64]));
                order = Some((epoch, perm));
            }
            let perm = &order.as_ref().expect("order set above").1;
            let samples: Vec<&TokenizedSample> =
                perm[j * cfg.batch_size..(j + 1) * cfg.batch_size].iter().map(|&i| &corpus[i]).collect();
            micro_batches.push(prepare_micro_batch(
                &samples,
                model_cfg.objective,
                &cfg.mask,
                cfg.seed,
                step,
                k,
            )?);
        }
        let report = match train_step(&mut state, &micro_batches, cfg, total, opts.exec) {
            Ok(r) => r,
            Err(e @ TrainError::NonFinite { .. }) => {
                // the state is untouched by a rejected step
                meta.step = state.step;
                checkpoint_of(&state, &meta)?.save(&opts.out_dir.join("last-good.ckpt"))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        log.write_all(format_row(&report).as_bytes())?;
        log.flush()?;
        on_step(&report);
        last = Some(report);

        if state.step % cfg.checkpoint_every == 0 || state.step == stop {
            meta.step = state.step;
            let path = opts.out_dir.join("checkpoints").join(format!("step-{:07}.ckpt", state.step));
            checkpoint_of(&state, &meta)?.save(&path)?;
            checkpoint = path;
        }
    }

    let completed = state.step == total;
    if completed {
        meta.step = state.step;
        let path = opts.out_dir.join("final.ckpt");
        checkpoint_of(&state, &meta)?.save(&path)?;
        checkpoint = path;
    }
    Ok(RunOutcome {
        state,
        total_steps: total,
        completed,
        last,
        metrics_path,
        checkpoint,
    })
}
