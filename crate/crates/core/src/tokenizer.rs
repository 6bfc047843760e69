//! Byte-pair encoding over nucleotide text with reserved special tokens.
//!
//! Ids `0..5` are the specials (`[PAD]`, `[CLS]`, `[EOS]`, `[MASK]`,
//! `[UNK]`), ids `5..9` are the single bases `A C G T`, and every further id
//! is the output of a learned merge, in training order.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::index::sample;
use thiserror::Error;

use crate::genomics_io::Chunk;
use crate::{rng, Objective};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const UNK_ID: u32 = 4;
pub const N_SPECIAL: usize = 5;
const SPECIAL_TOKENS: [&str; N_SPECIAL] = ["[PAD]", "[CLS]", "[EOS]", "[MASK]", "[UNK]"];
const BASE_TOKENS: [&str; 4] = ["A", "C", "G", "T"];
/// Smallest usable vocabulary: the specials plus the four bases.
pub const MIN_VOCAB: usize = N_SPECIAL + BASE_TOKENS.len();
/// Training looks at no more than this many chunks; larger corpora are
/// subsampled with the training seed.
pub const MAX_TRAINING_CHUNKS: usize = 50_000;
const FORMAT_TAG: &str = "bpe-v1";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocab_size {0} is below the minimum of {MIN_VOCAB}")]
    VocabTooSmall(usize),
    #[error("cannot train a tokenizer on an empty corpus")]
    EmptyCorpus,
    #[error("invalid base {ch:?} at position {pos}")]
    InvalidBase { pos: usize, ch: char },
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("max_tokens must be at least 2, got {0}")]
    MaxTokensTooSmall(usize),
    #[error("malformed tokenizer file at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

/// Learned vocabulary and ordered merge rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerModel {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    merges: Vec<(u32, u32)>,
    /// `(left, right) -> (rank, merged id)`
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

/// Token ids with their base-pair spans in the source chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSample {
    pub ids: Vec<u32>,
    /// Half-open `(start, end)` per token; specials carry empty spans.
    pub offsets: Vec<(usize, usize)>,
}

impl TokenizedSample {
    /// Number of non-special tokens.
    pub fn content_len(&self) -> usize {
        self.ids.iter().filter(|&&id| id as usize >= N_SPECIAL).count()
    }
}

fn base_id(b: u8) -> Option<u32> {
    match b {
        b'A' => Some(5),
        b'C' => Some(6),
        b'G' => Some(7),
        b'T' => Some(8),
        _ => None,
    }
}

impl TokenizerModel {
    fn with_base_vocab() -> Self {
        let vocab: Vec<String> = SPECIAL_TOKENS.iter().chain(BASE_TOKENS.iter()).map(|s| s.to_string()).collect();
        let index = vocab.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        TokenizerModel {
            vocab,
            index,
            merges: Vec::new(),
            ranks: HashMap::new(),
        }
    }

    fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let merged = format!("{}{}", self.vocab[left as usize], self.vocab[right as usize]);
        let id = match self.index.get(&merged) {
            Some(&id) => id,
            None => {
                let id = self.vocab.len() as u32;
                self.vocab.push(merged.clone());
                self.index.insert(merged, id);
                id
            }
        };
        self.ranks.insert((left, right), (self.merges.len(), id));
        self.merges.push((left, right));
        id
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.merges
            .iter()
            .map(|&(l, r)| (self.vocab[l as usize].as_str(), self.vocab[r as usize].as_str()))
    }

    pub fn n_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < N_SPECIAL
    }

    /// Split an ACGT string into tokens by applying merges in training
    /// order, returning ids and spans.
    pub fn tokenize(&self, chunk: &str) -> Result<(Vec<u32>, Vec<(usize, usize)>)> {
        let mut ids = Vec::with_capacity(chunk.len());
        let mut spans = Vec::with_capacity(chunk.len());
        for (pos, b) in chunk.bytes().enumerate() {
            let id = base_id(b).ok_or(TokenizerError::InvalidBase {
                pos,
                ch: chunk[pos..].chars().next().unwrap_or('?'),
            })?;
            ids.push(id);
            spans.push((pos, pos + 1));
        }
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, _)| rank))
                .min();
            let Some(rank) = best else { break };
            let (l, r) = self.merges[rank];
            let out = self.ranks[&(l, r)].1;
            let mut next_ids = Vec::with_capacity(ids.len());
            let mut next_spans = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
                    next_ids.push(out);
                    next_spans.push((spans[i].0, spans[i + 1].1));
                    i += 2;
                } else {
                    next_ids.push(ids[i]);
                    next_spans.push(spans[i]);
                    i += 1;
                }
            }
            ids = next_ids;
            spans = next_spans;
        }
        Ok((ids, spans))
    }

    /// Tokenize, keep the central `max_tokens - 1` content tokens (dropping
    /// one more from the right when the excess is odd), then attach `[CLS]`
    /// in front (masked objective) or `[EOS]` at the end (next-token
    /// objective).
    pub fn encode(&self, chunk: &str, objective: Objective, max_tokens: usize) -> Result<TokenizedSample> {
        if max_tokens < 2 {
            return Err(TokenizerError::MaxTokensTooSmall(max_tokens));
        }
        let (mut ids, mut spans) = self.tokenize(chunk)?;
        let budget = max_tokens - 1;
        if ids.len() > budget {
            let excess = ids.len() - budget;
            let left = excess / 2;
            ids = ids[left..left + budget].to_vec();
            spans = spans[left..left + budget].to_vec();
        }
        Ok(attach_special(ids, spans, objective))
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.vocab.get(id as usize).ok_or(TokenizerError::UnknownId(id))?;
            if !Self::is_special(id) {
                out.push_str(tok);
            }
        }
        Ok(out)
    }

    /// Serialize: header, one `left<TAB>right` merge per line, then the
    /// special-token assignments as `[NAME]<TAB>id`.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{FORMAT_TAG} {}", self.vocab.len())?;
        for (l, r) in self.merges() {
            writeln!(out, "{l}\t{r}")?;
        }
        for (id, name) in SPECIAL_TOKENS.iter().enumerate() {
            writeln!(out, "{name}\t{id}")?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("ascii tokenizer")
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let perr = |line: usize, reason: &str| TokenizerError::Parse {
            line,
            reason: reason.to_string(),
        };
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file"))?;
        let header = header?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(FORMAT_TAG) {
            return Err(perr(1, "expected 'bpe-v1 <vocab_size>' header"));
        }
        let declared: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| perr(1, "missing vocabulary size"))?;
        let mut model = Self::with_base_vocab();
        let mut specials_seen = 0;
        for (i, line) in lines {
            let line = line?;
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            let (l, r) = line.split_once('\t').ok_or_else(|| perr(lineno, "expected two tab-separated fields"))?;
            if l.starts_with('[') {
                let id: u32 = r.parse().map_err(|_| perr(lineno, "special id is not an integer"))?;
                if SPECIAL_TOKENS.get(id as usize) != Some(&l) {
                    return Err(perr(lineno, "special token id assignment does not match this format version"));
                }
                specials_seen += 1;
                continue;
            }
            if specials_seen > 0 {
                return Err(perr(lineno, "merge rule after the special-token section"));
            }
            let (Some(li), Some(ri)) = (model.id_of(l), model.id_of(r)) else {
                return Err(perr(lineno, "merge refers to a token not yet in the vocabulary"));
            };
            if Self::is_special(li) || Self::is_special(ri) {
                return Err(perr(lineno, "special tokens cannot be merged"));
            }
            model.push_merge(li, ri);
        }
        if specials_seen != N_SPECIAL {
            return Err(perr(0, "missing special-token assignments"));
        }
        if model.vocab_size() != declared {
            return Err(perr(1, "declared vocabulary size does not match the merges"));
        }
        Ok(model)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::read(text.as_bytes())
    }
}

fn attach_special(mut ids: Vec<u32>, mut spans: Vec<(usize, usize)>, objective: Objective) -> TokenizedSample {
    match objective {
        Objective::Mlm => {
            let at = spans.first().map_or(0, |s| s.0);
            ids.insert(0, CLS_ID);
            spans.insert(0, (at, at));
        }
        Objective::Ntp => {
            let at = spans.last().map_or(0, |s| s.1);
            ids.push(EOS_ID);
            spans.push((at, at));
        }
    }
    TokenizedSample { ids, offsets: spans }
}

/// Keep the central `n` content tokens of an encoded sample (same rule as
/// [`TokenizerModel::encode`]) and re-attach its special token.
pub fn truncate_content(sample: &TokenizedSample, n: usize, objective: Objective) -> TokenizedSample {
    let (ids, spans): (Vec<u32>, Vec<(usize, usize)>) = sample
        .ids
        .iter()
        .zip(&sample.offsets)
        .filter(|(&id, _)| !TokenizerModel::is_special(id))
        .map(|(&i, &s)| (i, s))
        .unzip();
    if ids.len() <= n {
        return attach_special(ids, spans, objective);
    }
    let left = (ids.len() - n) / 2;
    attach_special(ids[left..left + n].to_vec(), spans[left..left + n].to_vec(), objective)
}

/// Train a BPE vocabulary over the chunk corpus: start from single bases and
/// repeatedly merge the most frequent adjacent pair until the vocabulary
/// reaches `vocab_size` or no pair occurs at least twice. Frequency ties go
/// to the lexicographically smallest merged string. `seed` only matters when
/// the corpus exceeds [`MAX_TRAINING_CHUNKS`] and must be subsampled.
pub fn train_bpe(corpus: &[Chunk], vocab_size: usize, seed: u64) -> Result<TokenizerModel> {
    let seqs: Vec<&str> = corpus.iter().map(|c| c.seq.as_str()).collect();
    train_bpe_on(&seqs, vocab_size, seed)
}

pub fn train_bpe_on<S: AsRef<str>>(corpus: &[S], vocab_size: usize, seed: u64) -> Result<TokenizerModel> {
    if vocab_size < MIN_VOCAB {
        return Err(TokenizerError::VocabTooSmall(vocab_size));
    }
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let chosen: Vec<usize> = if corpus.len() > MAX_TRAINING_CHUNKS {
        let mut idx = sample(&mut rng::stream(seed, "bpe", &[]), corpus.len(), MAX_TRAINING_CHUNKS).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..corpus.len()).collect()
    };

    // identical sequences are merged into weighted words
    let mut word_index: HashMap<&str, usize> = HashMap::new();
    let mut words: Vec<Vec<u32>> = Vec::new();
    let mut weights: Vec<i64> = Vec::new();
    for &i in &chosen {
        let s = corpus[i].as_ref();
        if let Some(&w) = word_index.get(s) {
            weights[w] += 1;
            continue;
        }
        let mut ids = Vec::with_capacity(s.len());
        for (pos, b) in s.bytes().enumerate() {
            ids.push(base_id(b).ok_or(TokenizerError::InvalidBase {
                pos,
                ch: s[pos..].chars().next().unwrap_or('?'),
            })?);
        }
        word_index.insert(s, words.len());
        words.push(ids);
        weights.push(1);
    }

    let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut locations: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (w, ids) in words.iter().enumerate() {
        for p in ids.windows(2) {
            *counts.entry((p[0], p[1])).or_default() += weights[w];
            locations.entry((p[0], p[1])).or_default().insert(w);
        }
    }

    let mut model = TokenizerModel::with_base_vocab();
    while model.vocab_size() < vocab_size {
        let top = counts.values().copied().max().unwrap_or(0);
        if top < 2 {
            break;
        }
        let Some((_, _, pair)) = counts
            .iter()
            .filter(|(_, &c)| c == top)
            .map(|(&pair, _)| {
                let l = &model.vocab[pair.0 as usize];
                let r = &model.vocab[pair.1 as usize];
                (format!("{l}{r}"), l.clone(), pair)
            })
            .min()
        else {
            break;
        };
        let out = model.push_merge(pair.0, pair.1);

        let mut touched: Vec<usize> = locations.remove(&pair).unwrap_or_default().into_iter().collect();
        touched.sort_unstable();
        for w in touched {
            let weight = weights[w];
            let old = std::mem::take(&mut words[w]);
            for p in old.windows(2) {
                let e = counts.entry((p[0], p[1])).or_default();
                *e -= weight;
            }
            let mut merged = Vec::with_capacity(old.len());
            let mut i = 0;
            while i < old.len() {
                if i + 1 < old.len() && old[i] == pair.0 && old[i + 1] == pair.1 {
                    merged.push(out);
                    i += 2;
                } else {
                    merged.push(old[i]);
                    i += 1;
                }
            }
            for p in merged.windows(2) {
                *counts.entry((p[0], p[1])).or_default() += weight;
                locations.entry((p[0], p[1])).or_default().insert(w);
            }
            words[w] = merged;
        }
        counts.retain(|_, c| *c > 0);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> TokenizerModel {
        let corpus: Vec<String> = (0..40)
            .map(|i| ["ACGTACGTTTGACA", "GGGCCCATATATAT", "TTTTACGACGACGA"][i % 3].to_string())
            .collect();
        train_bpe_on(&corpus, 24, 0).unwrap()
    }

    #[test]
    fn first_merge_of_a_homopolymer_corpus() {
        let corpus = vec!["AAAA".to_string(); 20];
        let m = train_bpe_on(&corpus, 10, 0).unwrap();
        assert_eq!(m.merges().next(), Some(("A", "A")));
        assert_eq!(m.vocab_size(), 10);
    }

    #[test]
    fn minimum_vocab_has_no_merges() {
        let m = train_bpe_on(&["ACGTACGT"], 9, 0).unwrap();
        assert_eq!(m.n_merges(), 0);
        assert_eq!(m.vocab_size(), 9);
        assert!(matches!(train_bpe_on(&["ACGT"], 8, 0), Err(TokenizerError::VocabTooSmall(8))));
        assert!(matches!(train_bpe_on::<&str>(&[], 16, 0), Err(TokenizerError::EmptyCorpus)));
    }

    #[test]
    fn frequency_ties_go_to_smallest_merged_string() {
        // AC and AG each occur twice
        let m = train_bpe_on(&["AC", "AG", "AC", "AG"], 10, 0).unwrap();
        assert_eq!(m.merges().next(), Some(("A", "C")));
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let m = train_bpe_on(&["ACGT"], 100, 0).unwrap();
        assert_eq!(m.n_merges(), 0);
    }

    #[test]
    fn encode_places_special_tokens() {
        let m = train_bpe_on(&["ACGT"], 9, 0).unwrap();
        let s = m.encode("ACGT", Objective::Mlm, 16).unwrap();
        assert_eq!(s.ids, vec![CLS_ID, 5, 6, 7, 8]);
        assert_eq!(s.offsets, vec![(0, 0), (0, 1), (1, 2), (2, 3), (3, 4)]);
        let s = m.encode("ACGT", Objective::Ntp, 16).unwrap();
        assert_eq!(s.ids, vec![5, 6, 7, 8, EOS_ID]);
        assert!(matches!(m.encode("ACGU", Objective::Mlm, 16), Err(TokenizerError::InvalidBase { pos: 3, ch: 'U' })));
    }

    #[test]
    fn truncation_keeps_central_tokens() {
        let m = train_bpe_on(&["ACGT"], 9, 0).unwrap();
        // 7 content tokens, budget 4: drop 1 left and 2 right
        let s = m.encode("ACGTACG", Objective::Mlm, 5).unwrap();
        assert_eq!(s.ids, vec![CLS_ID, 6, 7, 8, 5]);
        assert_eq!(s.offsets[1], (1, 2));
        let s = m.encode("ACGTACG", Objective::Ntp, 5).unwrap();
        assert_eq!(*s.ids.last().unwrap(), EOS_ID);
        assert_eq!(s.ids.len(), 5);
        let t = truncate_content(&m.encode("ACGTACG", Objective::Mlm, 64).unwrap(), 4, Objective::Mlm);
        assert_eq!(t.ids, vec![CLS_ID, 6, 7, 8, 5]);
    }

    #[test]
    fn decode_skips_specials() {
        let m = toy();
        assert_eq!(m.decode(&[CLS_ID, 5, 6]).unwrap(), "AC");
        assert_eq!(m.decode(&[]).unwrap(), "");
        let bad = m.vocab_size() as u32;
        assert!(matches!(m.decode(&[bad]), Err(TokenizerError::UnknownId(id)) if id == bad));
    }

    #[test]
    fn vocab_invariants() {
        let m = toy();
        assert_eq!(m.vocab_size(), 24);
        for id in N_SPECIAL as u32..m.vocab_size() as u32 {
            assert!(m.token(id).unwrap().bytes().all(|b| b"ACGT".contains(&b)));
        }
        for (_, &(_, out)) in &m.ranks {
            assert!(!TokenizerModel::is_special(out));
        }
    }

    #[test]
    fn serialization_round_trip_and_determinism() {
        let m = toy();
        let text = m.to_text();
        assert!(text.starts_with("bpe-v1 24\n"));
        assert!(text.ends_with("[PAD]\t0\n[CLS]\t1\n[EOS]\t2\n[MASK]\t3\n[UNK]\t4\n"));
        let back = TokenizerModel::from_text(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(toy().to_text(), text);
        assert!(TokenizerModel::from_text("bpe-v2 9\n").is_err());
        assert!(TokenizerModel::from_text("bpe-v1 10\n[PAD]\t0\n[CLS]\t1\n[EOS]\t2\n[MASK]\t3\n[UNK]\t4\n").is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(s in "[ACGT]{0,200}") {
            let m = toy();
            let enc = m.encode(&s, Objective::Mlm, 512).unwrap();
            prop_assert_eq!(m.decode(&enc.ids).unwrap(), s.clone());
            // offsets tile the input
            let mut pos = 0;
            for (&id, &(a, b)) in enc.ids.iter().zip(&enc.offsets) {
                if TokenizerModel::is_special(id) {
                    prop_assert_eq!(a, b);
                    continue;
                }
                prop_assert_eq!(a, pos);
                prop_assert_eq!(&s[a..b], m.token(id).unwrap());
                pos = b;
            }
            prop_assert_eq!(pos, s.len());
            let enc = m.encode(&s, Objective::Ntp, 512).unwrap();
            prop_assert_eq!(m.decode(&enc.ids).unwrap(), s);
        }
    }
}
