//! FASTA ingestion, valid-base segmentation, overlapping chunking and
//! planted-motif synthetic corpora.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum GenomicsError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed FASTA at line {line}: {reason}")]
    MalformedFasta { line: usize, reason: String },
    #[error("FASTA record '{0}' has no sequence lines")]
    EmptyRecord(String),
    #[error("invalid chunk configuration: {0}")]
    InvalidChunkConfig(String),
    #[error("motif of length {motif_len} does not fit in sequences of length {seq_len}")]
    MotifTooLong { motif_len: usize, seq_len: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSynthetic(String),
    #[error("malformed chunk corpus at line {line}: {reason}")]
    MalformedCorpus { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, GenomicsError>;

/// An identified nucleotide string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub id: String,
    pub seq: String,
}

/// A fixed-length window of valid bases cut from a source record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub source_id: String,
    /// 0-based offset of the window in the source record, in bp.
    pub start: usize,
    pub seq: String,
}

/// Parse plain or concatenated FASTA. Ids stop at the first whitespace of the
/// header; sequence lines are concatenated with case preserved.
pub fn parse_fasta<R: BufRead>(reader: R) -> Result<Vec<SequenceRecord>> {
    let mut records = Vec::new();
    let mut current: Option<SequenceRecord> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        let lineno = i + 1;
        if let Some(header) = line.strip_prefix('>') {
            if let Some(done) = current.take() {
                records.push(finish(done)?);
            }
            let id = header.split_whitespace().next().unwrap_or("");
            if id.is_empty() {
                return Err(GenomicsError::MalformedFasta {
                    line: lineno,
                    reason: "header without an identifier".into(),
                });
            }
            current = Some(SequenceRecord {
                id: id.to_string(),
                seq: String::new(),
            });
            continue;
        }
        let body = line.trim();
        if body.is_empty() {
            continue;
        }
        match current.as_mut() {
            Some(rec) => {
                if let Some(bad) = body.chars().find(|c| !c.is_ascii_graphic()) {
                    return Err(GenomicsError::MalformedFasta {
                        line: lineno,
                        reason: format!("unexpected character {bad:?} in sequence"),
                    });
                }
                rec.seq.push_str(body);
            }
            None => {
                return Err(GenomicsError::MalformedFasta {
                    line: lineno,
                    reason: "sequence data before the first '>' header".into(),
                })
            }
        }
    }
    if let Some(done) = current.take() {
        records.push(finish(done)?);
    }
    Ok(records)
}

fn finish(rec: SequenceRecord) -> Result<SequenceRecord> {
    if rec.seq.is_empty() {
        Err(GenomicsError::EmptyRecord(rec.id))
    } else {
        Ok(rec)
    }
}

pub fn parse_fasta_str(text: &str) -> Result<Vec<SequenceRecord>> {
    parse_fasta(text.as_bytes())
}

/// Write records as FASTA, wrapping sequence lines at `width` characters.
pub fn write_fasta<W: Write>(mut out: W, records: &[SequenceRecord], width: usize) -> std::io::Result<()> {
    let width = width.max(1);
    for rec in records {
        writeln!(out, ">{}", rec.id)?;
        for line in rec.seq.as_bytes().chunks(width) {
            out.write_all(line)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Chunking parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChunkConfig {
    pub chunk_length: usize,
    pub overlap_fraction: f64,
    pub min_chunk_length: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        ChunkConfig {
            chunk_length: 128,
            overlap_fraction: 0.5,
            min_chunk_length: 16,
        }
    }
}

impl ChunkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_length < 2 {
            return Err(GenomicsError::InvalidChunkConfig(format!(
                "chunk_length must be at least 2, got {}",
                self.chunk_length
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(GenomicsError::InvalidChunkConfig(format!(
                "overlap_fraction must lie in [0, 1), got {}",
                self.overlap_fraction
            )));
        }
        if self.min_chunk_length == 0 || self.min_chunk_length > self.chunk_length {
            return Err(GenomicsError::InvalidChunkConfig(format!(
                "min_chunk_length must lie in [1, chunk_length], got {}",
                self.min_chunk_length
            )));
        }
        Ok(())
    }

    /// Distance between consecutive window starts.
    pub fn stride(&self) -> usize {
        ((self.chunk_length as f64 * (1.0 - self.overlap_fraction)).floor() as usize).max(1)
    }
}

/// Maximal runs of A/C/G/T (case folded to upper) with their offsets; runs
/// shorter than `min_len` are dropped.
pub fn extract_valid_segments(record: &SequenceRecord, min_len: usize) -> Vec<(usize, String)> {
    let mut out = Vec::new();
    let mut run = String::new();
    let mut run_start = 0;
    for (i, b) in record.seq.bytes().enumerate() {
        let up = b.to_ascii_uppercase();
        if matches!(up, b'A' | b'C' | b'G' | b'T') {
            if run.is_empty() {
                run_start = i;
            }
            run.push(up as char);
        } else if !run.is_empty() {
            if run.len() >= min_len {
                out.push((run_start, std::mem::take(&mut run)));
            } else {
                run.clear();
            }
        }
    }
    if !run.is_empty() && run.len() >= min_len {
        out.push((run_start, run));
    }
    out
}

/// Cut one valid segment into overlapping windows. `offset` is the
/// segment's position in its source record and is added to every start.
pub fn chunk_segment(source_id: &str, offset: usize, segment: &str, cfg: &ChunkConfig) -> Result<Vec<Chunk>> {
    cfg.validate()?;
    let n = segment.len();
    let len = cfg.chunk_length;
    let stride = cfg.stride();
    let mut chunks = Vec::new();
    let mut start = 0;
    let mut prev_end = 0;
    while start + len <= n {
        chunks.push(Chunk {
            source_id: source_id.to_string(),
            start: offset + start,
            seq: segment[start..start + len].to_string(),
        });
        prev_end = start + len;
        start += stride;
    }
    // trailing partial window, unless already covered by the previous one
    let tail_start = if chunks.is_empty() { 0 } else { start };
    if tail_start < n && n > prev_end && n - tail_start >= cfg.min_chunk_length {
        chunks.push(Chunk {
            source_id: source_id.to_string(),
            start: offset + tail_start,
            seq: segment[tail_start..].to_string(),
        });
    }
    Ok(chunks)
}

/// Segment a record at invalid bases and chunk every segment.
pub fn chunk_record(record: &SequenceRecord, cfg: &ChunkConfig) -> Result<Vec<Chunk>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for (offset, seg) in extract_valid_segments(record, cfg.min_chunk_length) {
        out.extend(chunk_segment(&record.id, offset, &seg, cfg)?);
    }
    Ok(out)
}

/// Write chunks as `source_id<TAB>start<TAB>seq` lines.
pub fn write_chunks<W: Write>(mut out: W, chunks: &[Chunk]) -> std::io::Result<()> {
    for c in chunks {
        writeln!(out, "{}\t{}\t{}", c.source_id, c.start, c.seq)?;
    }
    Ok(())
}

pub fn read_chunks<R: BufRead>(reader: R) -> Result<Vec<Chunk>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| GenomicsError::MalformedCorpus {
            line: i + 1,
            reason: reason.to_string(),
        };
        let mut parts = line.split('\t');
        let (Some(id), Some(start), Some(seq), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected source_id, start and seq separated by tabs"));
        };
        let start = start.parse().map_err(|_| bad("start is not a non-negative integer"))?;
        if seq.is_empty() || !seq.bytes().all(|b| matches!(b, b'A' | b'C' | b'G' | b'T')) {
            return Err(bad("seq must be a non-empty string over A/C/G/T"));
        }
        out.push(Chunk {
            source_id: id.to_string(),
            start,
            seq: seq.to_string(),
        });
    }
    Ok(out)
}

/// Parameters of a planted-motif corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub seq_len: usize,
    pub n_sequences: usize,
    /// Candidate motifs; each planted sequence receives one, chosen uniformly.
    pub motifs: Vec<String>,
    /// Fraction of sequences labelled positive.
    pub positive_fraction: f64,
    /// Planting probability for positives.
    pub p_plant_positive: f64,
    /// Planting probability for negatives.
    pub p_plant_negative: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seq_len: 128,
            n_sequences: 1000,
            motifs: vec!["TATAAT".into()],
            positive_fraction: 0.5,
            p_plant_positive: 1.0,
            p_plant_negative: 0.0,
        }
    }
}

/// A synthetic corpus with its labels and, per sequence, where a motif was
/// planted (`None` for background-only sequences).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub records: Vec<SequenceRecord>,
    pub labels: Vec<u8>,
    pub motif_positions: Vec<Option<(usize, usize)>>,
}

const BASES: [u8; 4] = *b"ACGT";

/// Uniform i.i.d. background over ACGT with motifs planted at uniform random
/// positions. Fully determined by `seed`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    if spec.motifs.is_empty() {
        return Err(GenomicsError::InvalidSynthetic("at least one motif is required".into()));
    }
    for m in &spec.motifs {
        if m.is_empty() || !m.bytes().all(|b| BASES.contains(&b)) {
            return Err(GenomicsError::InvalidSynthetic(format!("motif {m:?} must be non-empty A/C/G/T")));
        }
        if m.len() > spec.seq_len {
            return Err(GenomicsError::MotifTooLong {
                motif_len: m.len(),
                seq_len: spec.seq_len,
            });
        }
    }
    for (name, p) in [
        ("positive_fraction", spec.positive_fraction),
        ("p_plant_positive", spec.p_plant_positive),
        ("p_plant_negative", spec.p_plant_negative),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(GenomicsError::InvalidSynthetic(format!("{name} must lie in [0, 1], got {p}")));
        }
    }
    let mut rng = rng::stream(seed, "synthetic", &[]);
    let mut records = Vec::with_capacity(spec.n_sequences);
    let mut labels = Vec::with_capacity(spec.n_sequences);
    let mut positions = Vec::with_capacity(spec.n_sequences);
    for i in 0..spec.n_sequences {
        let positive = rng.gen_bool(spec.positive_fraction);
        let mut seq: Vec<u8> = (0..spec.seq_len).map(|_| BASES[rng.gen_range(0..4)]).collect();
        let p = if positive { spec.p_plant_positive } else { spec.p_plant_negative };
        let mut planted = None;
        if rng.gen_bool(p) {
            let motif = spec.motifs[rng.gen_range(0..spec.motifs.len())].as_bytes();
            let at = rng.gen_range(0..=spec.seq_len - motif.len());
            seq[at..at + motif.len()].copy_from_slice(motif);
            planted = Some((at, at + motif.len()));
        }
        records.push(SequenceRecord {
            id: format!("syn{i}"),
            seq: String::from_utf8(seq).expect("ascii bases"),
        });
        labels.push(u8::from(positive));
        positions.push(planted);
    }
    Ok(SyntheticCorpus {
        records,
        labels,
        motif_positions: positions,
    })
}
