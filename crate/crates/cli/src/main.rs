//! `jepa-dna`: prepare corpora, train tokenizers, pre-train encoders and
//! evaluate them from the command line.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use jepa_dna::par::Execution;
use jepa_dna::trainer::TrainError;
use jepa_dna::Objective;

#[derive(Debug, Parser)]
#[command(name = "jepa-dna", version, about = "Latent-predictive pre-training for DNA sequence encoders")]
struct Cli {
    /// Seed for every random stream of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run on the calling thread only.
    #[arg(long, global = true)]
    deterministic: bool,
    /// JSON config with optional `chunk`, `synthetic`, `model`, `train` and
    /// `probe` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Chunk FASTA files (or generate a planted-motif corpus) into a TSV corpus.
    Prepare {
        #[arg(long)]
        fasta: Vec<PathBuf>,
        #[arg(long)]
        synthetic: bool,
        #[arg(long)]
        out: PathBuf,
        /// Task file of `seq<TAB>label` rows for a synthetic corpus.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        chunk_length: Option<usize>,
        #[arg(long)]
        overlap: Option<f64>,
        #[arg(long)]
        min_length: Option<usize>,
        #[arg(long)]
        n_sequences: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long = "motif")]
        motifs: Vec<String>,
    },
    /// Learn BPE merges from a chunk corpus.
    TrainTokenizer {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 512)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train an encoder; writes metrics, checkpoints and a manifest.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps, keeping a checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Linear probe on frozen embeddings.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Use `ref || alt` features from three-column task files.
        #[arg(long)]
        variant: bool,
        /// Report path (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-example positive-class probabilities.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Score variants by embedding distance to their reference.
    Zeroshot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ObjectiveArg::Mlm)]
        objective: ObjectiveArg,
        /// full, mlm, jepa, or config (the `train.weights` section).
        #[arg(long, default_value = "full")]
        weights: String,
        #[arg(long, default_value_t = 50)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-2)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Mlm,
    Ntp,
}

/// Flags shared by every command.
pub struct Global {
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub config: Option<PathBuf>,
}

impl Global {
    pub fn exec(&self) -> Execution {
        if self.deterministic {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

/// A diverged run or a failed numerical check; exits with code 3.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| {
        e.is::<NumericalFailure>() || matches!(e.downcast_ref::<TrainError>(), Some(TrainError::NonFinite { .. }))
    });
    if numerical {
        3
    } else {
        2
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = Global {
        seed: cli.seed,
        deterministic: cli.deterministic,
        config: cli.config,
    };
    match cli.command {
        Command::Prepare {
            fasta,
            synthetic,
            out,
            labels,
            chunk_length,
            overlap,
            min_length,
            n_sequences,
            seq_len,
            motifs,
        } => commands::prepare(
            &g,
            commands::PrepareArgs {
                fasta,
                synthetic,
                out,
                labels,
                chunk_length,
                overlap,
                min_length,
                n_sequences,
                seq_len,
                motifs,
            },
        ),
        Command::TrainTokenizer { corpus, vocab_size, out } => commands::train_tokenizer(&g, &corpus, vocab_size, &out),
        Command::Pretrain {
            corpus,
            tokenizer,
            out,
            resume,
            stop_after,
            log_every,
        } => commands::pretrain(
            &g,
            commands::PretrainArgs {
                corpus,
                tokenizer,
                out,
                resume,
                stop_after,
                log_every,
            },
        ),
        Command::Probe {
            checkpoint,
            tokenizer,
            train,
            test,
            variant,
            out,
            scores,
        } => commands::probe(
            &g,
            commands::ProbeArgs {
                checkpoint,
                tokenizer,
                train,
                test,
                variant,
                out,
                scores,
            },
        ),
        Command::Zeroshot {
            checkpoint,
            tokenizer,
            pairs,
            out,
            report,
        } => commands::zeroshot(
            &g,
            commands::ZeroShotArgs {
                checkpoint,
                tokenizer,
                pairs,
                out,
                report,
            },
        ),
        Command::Gradcheck {
            objective,
            weights,
            coords,
            epsilon,
            tolerance,
            out,
        } => commands::gradcheck(
            &g,
            commands::GradCheckArgs {
                objective: match objective {
                    ObjectiveArg::Mlm => Objective::Mlm,
                    ObjectiveArg::Ntp => Objective::Ntp,
                },
                weights,
                coords,
                epsilon,
                tolerance,
                out,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
