use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_jepa-dna"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_MODEL: &str = r#""model": {
    "n_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 32, "max_tokens": 48, "dropout_rate": 0.0,
    "predictor": {"p_layers": 1, "p_dim": 12, "p_heads": 3, "p_ff": 24}
}"#;

fn write_config(dir: &Path, train: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, format!("{{{TINY_MODEL}, \"train\": {train}, \"probe\": {{\"lr\": 0.01, \"epochs\": 20}}}}")).unwrap();
    path
}

const SMOKE_TRAIN: &str = r#"{
    "phase1_steps": 10, "phase1_lr": 0.01, "warmup_steps": 20,
    "lr_start": 0.002, "lr_peak": 0.02, "lr_end": 0.002,
    "batch_size": 8, "accum_steps": 1, "epochs": 25, "checkpoint_every": 100
}"#;

/// Synthetic corpus, labels and tokenizer under `dir`.
fn prepared(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let corpus = dir.join("corpus.tsv");
    let labels = dir.join("labels.tsv");
    let tok = dir.join("tok.bpe");
    ok(&[
        "--seed", "3", "prepare", "--synthetic", "--n-sequences", "64", "--seq-len", "60",
        "--out", s(&corpus), "--labels", s(&labels),
    ]);
    ok(&["train-tokenizer", "--corpus", s(&corpus), "--vocab-size", "16", "--out", s(&tok)]);
    (corpus, labels, tok)
}

/// Window starts of one segment under the chunking rule, written out
/// independently of the library.
fn expected_chunks(len: usize, chunk: usize, overlap: f64, min_len: usize) -> usize {
    let stride = ((chunk as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut n = 0;
    let mut prev_end = 0;
    let mut start = 0;
    while start < len {
        let end = (start + chunk).min(len);
        let full = end - start == chunk;
        if full || (end - start >= min_len && end > prev_end) {
            n += 1;
            prev_end = end;
        }
        if !full {
            break;
        }
        start += stride;
    }
    n
}

#[test]
fn prepare_chunks_fasta() {
    let dir = tempfile::tempdir().unwrap();
    let fasta = dir.path().join("in.fa");
    let a = "ACGT".repeat(75);
    let b = format!("{}NNNN{}", "GATTACA".repeat(4), "TTGCA".repeat(10));
    fs::write(&fasta, format!(">a desc\n{}\n{}\n>b\n{b}\n", &a[..150], &a[150..])).unwrap();
    let out = dir.path().join("chunks.tsv");
    ok(&[
        "prepare", "--fasta", s(&fasta), "--out", s(&out), "--chunk-length", "128", "--overlap", "0.5",
        "--min-length", "16",
    ]);
    let text = fs::read_to_string(&out).unwrap();
    let expected = expected_chunks(300, 128, 0.5, 16) + expected_chunks(28, 128, 0.5, 16) + expected_chunks(50, 128, 0.5, 16);
    assert_eq!(expected, 4 + 1 + 1);
    assert_eq!(text.lines().count(), expected);
    assert!(text.lines().next().unwrap().starts_with("a\t0\tACGT"));
    assert!(text.lines().any(|l| l.starts_with("b\t32\tTTGCA")));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("chunks.tsv.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "prepare");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn missing_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["prepare", "--fasta", "/nonexistent/x.fa", "--out", s(&dir.path().join("o.tsv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/x.fa"));
}

#[test]
fn invalid_config_field_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, _, tok) = prepared(dir.path());
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"batch_sise": 4}}"#).unwrap();
    let args = ["--config", s(&cfg), "pretrain", "--corpus", s(&corpus), "--tokenizer", s(&tok), "--out", s(dir.path())];
    let out = run(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_sise"));

    fs::write(&cfg, r#"{"train": {"momentum": 1.5}}"#).unwrap();
    let out = run(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.momentum"));
}

#[test]
fn synthetic_prepare_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, labels, _) = prepared(dir.path());
    let again = dir.path().join("again.tsv");
    ok(&["--seed", "3", "prepare", "--synthetic", "--n-sequences", "64", "--seq-len", "60", "--out", s(&again)]);
    assert_eq!(fs::read(&corpus).unwrap(), fs::read(&again).unwrap());
    assert_eq!(fs::read_to_string(&corpus).unwrap().lines().count(), 64);
    let l = fs::read_to_string(labels).unwrap();
    assert_eq!(l.lines().next(), Some("seq\tlabel"));
    assert_eq!(l.lines().count(), 65);
}

fn total_losses(metrics: &Path) -> Vec<f64> {
    fs::read_to_string(metrics)
        .unwrap()
        .lines()
        .skip(2)
        .map(|l| l.split('\t').nth(5).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, labels, tok) = prepared(dir.path());
    let cfg = write_config(dir.path(), SMOKE_TRAIN);
    let run_dir = dir.path().join("run");
    ok(&[
        "--config", s(&cfg), "--deterministic", "pretrain", "--corpus", s(&corpus), "--tokenizer", s(&tok),
        "--out", s(&run_dir),
    ]);
    // 64 / 8 = 8 batches per epoch, 25 epochs
    let losses = total_losses(&run_dir.join("metrics.tsv"));
    assert_eq!(losses.len(), 200);
    assert!(losses[199] < losses[0], "{} vs {}", losses[199], losses[0]);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "pretrain");
    let ckpt = run_dir.join("final.ckpt");
    assert!(ckpt.exists());

    let report_path = dir.path().join("probe.json");
    let scores = dir.path().join("probe_scores.tsv");
    ok(&[
        "--config", s(&cfg), "probe", "--checkpoint", s(&ckpt), "--tokenizer", s(&tok), "--train", s(&labels),
        "--test", s(&labels), "--out", s(&report_path), "--scores", s(&scores),
    ]);
    let report: Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    for key in ["auroc", "auprc", "mcc"] {
        assert!(report[key].is_number(), "{key} missing");
    }
    assert_eq!(fs::read_to_string(&scores).unwrap().lines().count(), 65);

    let text = fs::read_to_string(&labels).unwrap();
    let mut pairs = String::new();
    for (i, line) in text.lines().skip(1).take(10).enumerate() {
        let seq = line.split('\t').next().unwrap();
        let alt = if i % 2 == 0 {
            seq.to_string()
        } else {
            format!("{}{}", if seq.starts_with('A') { "C" } else { "A" }, &seq[1..])
        };
        pairs.push_str(&format!("{seq}\t{alt}\t{}\n", i % 2));
    }
    let pairs_path = dir.path().join("pairs.tsv");
    fs::write(&pairs_path, pairs).unwrap();
    let zs = dir.path().join("zs.tsv");
    let zs_report = dir.path().join("zs.json");
    ok(&[
        "zeroshot", "--checkpoint", s(&ckpt), "--tokenizer", s(&tok), "--pairs", s(&pairs_path), "--out", s(&zs),
        "--report", s(&zs_report),
    ]);
    let rows: Vec<String> = fs::read_to_string(&zs).unwrap().lines().skip(1).map(String::from).collect();
    assert_eq!(rows.len(), 10);
    for (i, row) in rows.iter().enumerate() {
        if i % 2 == 0 {
            assert_eq!(row, &format!("{i}\t0"));
        }
    }
    let r: Value = serde_json::from_str(&fs::read_to_string(&zs_report).unwrap()).unwrap();
    assert_eq!(r["n_pairs"], 10);
    assert!(r["metrics"]["polarity"].is_string());
}

#[test]
fn resume_continues_the_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, _, tok) = prepared(dir.path());
    let train = r#"{"phase1_steps": 2, "phase1_lr": 0.01, "warmup_steps": 2, "lr_start": 0.002, "lr_peak": 0.02,
        "lr_end": 0.002, "batch_size": 8, "accum_steps": 1, "epochs": 2, "checkpoint_every": 4}"#;
    let cfg = write_config(dir.path(), train);
    let base = ["--config", s(&cfg), "--deterministic", "pretrain", "--corpus", s(&corpus), "--tokenizer", s(&tok)];
    let full = dir.path().join("full");
    ok(&[&base[..], &["--out", s(&full)]].concat());
    let part = dir.path().join("part");
    ok(&[&base[..], &["--out", s(&part), "--stop-after", "6"]].concat());
    let ck = part.join("checkpoints/step-0000006.ckpt");
    ok(&[&base[..], &["--out", s(&part), "--resume", s(&ck)]].concat());
    assert_eq!(
        fs::read(full.join("metrics.tsv")).unwrap(),
        fs::read(part.join("metrics.tsv")).unwrap()
    );
    assert_eq!(fs::read(full.join("final.ckpt")).unwrap(), fs::read(part.join("final.ckpt")).unwrap());
}

#[test]
fn one_class_probe_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, _, tok) = prepared(dir.path());
    let train = r#"{"phase1_steps": 0, "batch_size": 8, "accum_steps": 1, "epochs": 1}"#;
    let cfg = write_config(dir.path(), train);
    let run_dir = dir.path().join("run");
    ok(&["--config", s(&cfg), "pretrain", "--corpus", s(&corpus), "--tokenizer", s(&tok), "--out", s(&run_dir)]);
    let task = dir.path().join("one.tsv");
    fs::write(&task, "ACGTACGTAC\t1\nTTTTACGTAA\t1\n").unwrap();
    let ckpt = run_dir.join("final.ckpt");
    let out = run(&[
        "probe", "--checkpoint", s(&ckpt), "--tokenizer", s(&tok), "--train", s(&task), "--test", s(&task),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[
        "probe", "--checkpoint", s(&ckpt), "--tokenizer", s(&tok), "--train", s(&task), "--test", s(&task),
        "--variant",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_3_with_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, _, tok) = prepared(dir.path());
    let train = r#"{"phase1_steps": 0, "warmup_steps": 0, "lr_start": 1e30, "lr_peak": 1e30, "lr_end": 1e30,
        "batch_size": 8, "accum_steps": 1, "epochs": 4}"#;
    let cfg = write_config(dir.path(), train);
    let run_dir = dir.path().join("run");
    let out = run(&["--config", s(&cfg), "pretrain", "--corpus", s(&corpus), "--tokenizer", s(&tok), "--out", s(&run_dir)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
    assert!(run_dir.join("last-good.ckpt").exists());
}

#[test]
fn gradcheck_passes_on_the_tiny_config() {
    for objective in ["mlm", "ntp"] {
        let out = ok(&["gradcheck", "--objective", objective, "--weights", "full"]);
        let report: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(report["target_gradient_slots"], 0);
        assert_eq!(report["groups"].as_array().unwrap().len(), 3);
    }
}
