//! Corpus ingestion: tab-separated sentence pairs in, padded id batches out.
//!
//! Input lines look like `ENGLISH<TAB>FRENCH`. Text normalization follows the
//! fixed recipe: Unicode-decompose, strip diacritics, lowercase, split `.`
//! `!` `?` into their own tokens, map every other non-alphabetic character to
//! a space, then tokenize on whitespace.

pub mod synth;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::num::rng::RngStream;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corpus {0} contains no usable pairs")]
    EmptyCorpus(String),
    #[error("invalid parameter {name}: {reason}")]
    InvalidParam { name: &'static str, reason: String },
}

/// Reserved vocabulary slots.
pub const PAD_ID: u32 = 0;
pub const START_ID: u32 = 1;
pub const END_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const START_TOKEN: &str = "<start>";
pub const END_TOKEN: &str = "<end>";
pub const UNK_TOKEN: &str = "<unk>";

/// Which side of the corpus feeds the encoder. The samples the corpus ships
/// with translate French into English, so that is the default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    FrenchToEnglish,
    EnglishToFrench,
}

impl Direction {
    pub fn parse(s: &str) -> Result<Self, CorpusError> {
        match s {
            "fr-en" => Ok(Direction::FrenchToEnglish),
            "en-fr" => Ok(Direction::EnglishToFrench),
            other => Err(CorpusError::InvalidParam {
                name: "direction",
                reason: format!("{other:?} (expected fr-en or en-fr)"),
            }),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::FrenchToEnglish => write!(f, "fr-en"),
            Direction::EnglishToFrench => write!(f, "en-fr"),
        }
    }
}

/// One normalized sentence pair in corpus field order (English, French).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub english: Vec<String>,
    pub french: Vec<String>,
    pub raw_line_no: usize,
}

impl SentencePair {
    /// (source tokens, target tokens) under the given direction.
    pub fn oriented(&self, direction: Direction) -> (&[String], &[String]) {
        match direction {
            Direction::FrenchToEnglish => (&self.french, &self.english),
            Direction::EnglishToFrench => (&self.english, &self.french),
        }
    }
}

/// Normalize one raw sentence into tokens.
pub fn normalize(s: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for c in s.nfd() {
        if is_combining_mark(c) {
            continue;
        }
        for lc in c.to_lowercase() {
            match lc {
                'a'..='z' => cur.push(lc),
                '.' | '!' | '?' => {
                    if !cur.is_empty() {
                        tokens.push(std::mem::take(&mut cur));
                    }
                    tokens.push(lc.to_string());
                }
                _ => {
                    if !cur.is_empty() {
                        tokens.push(std::mem::take(&mut cur));
                    }
                }
            }
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

/// Length/content filters applied while loading.
#[derive(Clone, Debug, Default)]
pub struct PairFilters {
    /// Maximum token count per side (after normalization).
    pub max_tokens: Option<usize>,
    /// Keep only pairs whose English side starts with one of these prefixes
    /// (compared on normalized tokens joined by spaces).
    pub english_prefixes: Option<Vec<String>>,
}

/// Pairs plus counters for everything that was dropped on the way in.
#[derive(Debug)]
pub struct LoadReport {
    pub pairs: Vec<SentencePair>,
    /// Lines without exactly two tab-separated fields.
    pub malformed: usize,
    /// Pairs where a side normalized to nothing.
    pub empty_side: usize,
    /// Pairs removed by length or prefix filters.
    pub filtered: usize,
}

/// Read `ENGLISH<TAB>FRENCH` lines, normalize, and filter.
pub fn load_pairs(path: &Path, filters: &PairFilters) -> Result<LoadReport, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let report = load_pairs_from_str(&text, filters);
    if report.pairs.is_empty() {
        return Err(CorpusError::EmptyCorpus(path.display().to_string()));
    }
    Ok(report)
}

pub fn load_pairs_from_str(text: &str, filters: &PairFilters) -> LoadReport {
    let mut pairs = Vec::new();
    let mut malformed = 0usize;
    let mut empty_side = 0usize;
    let mut filtered = 0usize;
    for (line_no, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (english_raw, french_raw) = match (fields.next(), fields.next(), fields.next()) {
            (Some(e), Some(f), None) => (e, f),
            _ => {
                malformed += 1;
                continue;
            }
        };
        let english = normalize(english_raw);
        let french = normalize(french_raw);
        if english.is_empty() || french.is_empty() {
            empty_side += 1;
            continue;
        }
        if let Some(max) = filters.max_tokens {
            if english.len() > max || french.len() > max {
                filtered += 1;
                continue;
            }
        }
        if let Some(prefixes) = &filters.english_prefixes {
            let joined = english.join(" ");
            if !prefixes.iter().any(|p| joined.starts_with(p.as_str())) {
                filtered += 1;
                continue;
            }
        }
        pairs.push(SentencePair {
            english,
            french,
            raw_line_no: line_no + 1,
        });
    }
    LoadReport {
        pairs,
        malformed,
        empty_side,
        filtered,
    }
}

/// Token-id bijection with fixed reserved slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    fn with_reserved() -> Self {
        let id_to_token: Vec<String> = [PAD_TOKEN, START_TOKEN, END_TOKEN, UNK_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            token_to_id,
            id_to_token,
        }
    }

    /// Build from token frequencies: highest count first, ties broken by
    /// first occurrence, truncated at `cap` total entries (reserved included).
    pub fn build<'a>(tokens: impl Iterator<Item = &'a str>, cap: usize) -> Self {
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new(); // token -> (count, first_seen)
        for (pos, tok) in tokens.enumerate() {
            let entry = counts.entry(tok).or_insert((0, pos));
            entry.0 += 1;
        }
        let mut ranked: Vec<(&str, (usize, usize))> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));

        let mut vocab = Self::with_reserved();
        for (tok, _) in ranked {
            if vocab.len() >= cap {
                break;
            }
            let id = vocab.id_to_token.len() as u32;
            vocab.token_to_id.insert(tok.to_string(), id);
            vocab.id_to_token.push(tok.to_string());
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn decode(&self, id: u32) -> &str {
        self.id_to_token
            .get(id as usize)
            .map(|s| s.as_str())
            .unwrap_or(UNK_TOKEN)
    }

    /// One token per line, in id order.
    pub fn export_lines(&self) -> String {
        let mut out = String::new();
        for t in &self.id_to_token {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_export_lines(text: &str) -> Result<Self, CorpusError> {
        let id_to_token: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if id_to_token.len() < 4
            || id_to_token[PAD_ID as usize] != PAD_TOKEN
            || id_to_token[START_ID as usize] != START_TOKEN
            || id_to_token[END_ID as usize] != END_TOKEN
            || id_to_token[UNK_ID as usize] != UNK_TOKEN
        {
            return Err(CorpusError::InvalidParam {
                name: "vocab file",
                reason: "reserved tokens missing or out of order".into(),
            });
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }
}

/// Build source and target vocabularies from oriented pairs.
pub fn build_vocab(
    pairs: &[SentencePair],
    direction: Direction,
    cap: usize,
) -> Result<(Vocab, Vocab), CorpusError> {
    if pairs.is_empty() {
        return Err(CorpusError::EmptyCorpus("<in-memory>".into()));
    }
    if cap < 4 {
        return Err(CorpusError::InvalidParam {
            name: "vocab cap",
            reason: format!("{cap} below the 4 reserved slots"),
        });
    }
    let src = Vocab::build(
        pairs
            .iter()
            .flat_map(|p| p.oriented(direction).0.iter().map(|s| s.as_str())),
        cap,
    );
    let tgt = Vocab::build(
        pairs
            .iter()
            .flat_map(|p| p.oriented(direction).1.iter().map(|s| s.as_str())),
        cap,
    );
    Ok((src, tgt))
}

/// Padded id rows for one batch.
///
/// Source rows are `tokens + END`, target rows `START + tokens + END`, each
/// truncated so the framed row fits `max_len`, then PAD-filled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub src_ids: Vec<Vec<u32>>,
    pub tgt_ids: Vec<Vec<u32>>,
    /// True (unpadded) row lengths, END/START included.
    pub src_len: Vec<usize>,
    pub tgt_len: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.src_ids.len()
    }
}

/// Frame one pair the same way batches do: `(src_row, src_len, tgt_row,
/// tgt_len)`, PAD-filled to `max_len`.
pub fn frame_pair(
    pair: &SentencePair,
    direction: Direction,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    max_len: usize,
) -> (Vec<u32>, usize, Vec<u32>, usize) {
    let (src_tokens, tgt_tokens) = pair.oriented(direction);
    let src = frame_src(src_tokens, src_vocab, max_len);
    let tgt = frame_tgt(tgt_tokens, tgt_vocab, max_len);
    let src_len = src_tokens.len().min(max_len - 1) + 1;
    let tgt_len = tgt_tokens.len().min(max_len - 2) + 2;
    (src, src_len, tgt, tgt_len)
}

fn frame_src(tokens: &[String], vocab: &Vocab, max_len: usize) -> Vec<u32> {
    let keep = tokens.len().min(max_len - 1);
    let mut row: Vec<u32> = tokens[..keep].iter().map(|t| vocab.encode(t)).collect();
    row.push(END_ID);
    row.resize(max_len, PAD_ID);
    row
}

fn frame_tgt(tokens: &[String], vocab: &Vocab, max_len: usize) -> Vec<u32> {
    let keep = tokens.len().min(max_len - 2);
    let mut row = vec![START_ID];
    row.extend(tokens[..keep].iter().map(|t| vocab.encode(t)));
    row.push(END_ID);
    row.resize(max_len, PAD_ID);
    row
}

/// Shuffle pairs and cut them into padded batches.
pub fn make_batches(
    pairs: &[SentencePair],
    direction: Direction,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    batch_size: usize,
    max_len: usize,
    rng: &mut RngStream,
) -> Result<Vec<Batch>, CorpusError> {
    if batch_size == 0 {
        return Err(CorpusError::InvalidParam {
            name: "batch size",
            reason: "must be positive".into(),
        });
    }
    if max_len < 3 {
        return Err(CorpusError::InvalidParam {
            name: "max len",
            reason: format!("{max_len} too small to frame START/END"),
        });
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rng.shuffle(&mut order);

    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let mut batch = Batch {
            src_ids: Vec::with_capacity(chunk.len()),
            tgt_ids: Vec::with_capacity(chunk.len()),
            src_len: Vec::with_capacity(chunk.len()),
            tgt_len: Vec::with_capacity(chunk.len()),
        };
        for &i in chunk {
            let (src_tokens, tgt_tokens) = pairs[i].oriented(direction);
            let src = frame_src(src_tokens, src_vocab, max_len);
            let tgt = frame_tgt(tgt_tokens, tgt_vocab, max_len);
            batch.src_len.push(src_tokens.len().min(max_len - 1) + 1);
            batch.tgt_len.push(tgt_tokens.len().min(max_len - 2) + 2);
            batch.src_ids.push(src);
            batch.tgt_ids.push(tgt);
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Deterministic disjoint split; `val_fraction` of the pairs (rounded) go to
/// the validation side.
pub fn split_train_val(
    pairs: &[SentencePair],
    val_fraction: f64,
    rng: &mut RngStream,
) -> Result<(Vec<SentencePair>, Vec<SentencePair>), CorpusError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(CorpusError::InvalidParam {
            name: "val fraction",
            reason: format!("{val_fraction} outside (0, 1)"),
        });
    }
    if pairs.len() < 2 {
        return Err(CorpusError::InvalidParam {
            name: "pairs",
            reason: "need at least 2 pairs to split".into(),
        });
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rng.shuffle(&mut order);
    let n_val = ((pairs.len() as f64) * val_fraction).round() as usize;
    let n_val = n_val.clamp(1, pairs.len() - 1);
    let val: Vec<SentencePair> = order[..n_val].iter().map(|&i| pairs[i].clone()).collect();
    let train: Vec<SentencePair> = order[n_val..].iter().map(|&i| pairs[i].clone()).collect();
    Ok((train, val))
}
