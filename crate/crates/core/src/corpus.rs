//! Parallel corpus loading, normalization, validation and batching.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::rng::Rng;
use crate::subword::{SubwordModel, PAD_ID};

/// Window for length bucketing: pairs are sorted by source token length
/// within consecutive windows of this many pairs, never globally.
pub const BUCKET_WINDOW: usize = 1024;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} is not valid UTF-8")]
    Encoding { path: String },
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("corpus is empty")]
    Empty,
    #[error("invalid batching config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "valid" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub id: usize,
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    pub split: Split,
    pub source_lang: String,
    pub target_lang: String,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CleaningPolicy {
    /// Any malformed or empty-after-normalization line is an error.
    Strict,
    /// Malformed lines are skipped and counted.
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Tsv,
    Jsonl,
}

#[derive(Debug)]
pub struct LoadOutcome {
    pub corpus: ParallelCorpus,
    /// Lines skipped under the drop policy.
    pub dropped: usize,
}

/// Unicode canonical composition, control characters and whitespace runs
/// collapsed to single spaces, ends trimmed. Total and idempotent.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.nfc() {
        if c.is_whitespace() || c.is_control() {
            pending_space = true;
            continue;
        }
        if pending_space && !out.is_empty() {
            out.push(' ');
        }
        pending_space = false;
        out.push(c);
    }
    out
}

/// Load a TSV (`source<TAB>target`) or JSONL (`{"source":…,"target":…}`)
/// file. UTF-8 only; a byte-order mark is stripped.
pub fn load_parallel(
    path: &Path,
    format: CorpusFormat,
    policy: CleaningPolicy,
    split: Split,
) -> Result<LoadOutcome, CorpusError> {
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let text = String::from_utf8(bytes).map_err(|_| CorpusError::Encoding {
        path: path.display().to_string(),
    })?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(&text);

    #[derive(Deserialize)]
    struct JsonPair {
        source: String,
        target: String,
    }

    let mut pairs = Vec::new();
    let mut dropped = 0usize;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let raw: Result<(String, String), String> = match format {
            CorpusFormat::Tsv => {
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() == 2 {
                    Ok((fields[0].to_string(), fields[1].to_string()))
                } else {
                    Err(format!("expected 2 tab-separated fields, got {}", fields.len()))
                }
            }
            CorpusFormat::Jsonl => serde_json::from_str::<JsonPair>(line)
                .map(|p| (p.source, p.target))
                .map_err(|e| format!("bad json object: {e}")),
        };
        let checked = raw.and_then(|(s, t)| {
            let s = normalize_text(&s);
            let t = normalize_text(&t);
            if s.is_empty() || t.is_empty() {
                Err("empty source or target after normalization".to_string())
            } else {
                Ok((s, t))
            }
        });
        match (checked, policy) {
            (Ok((source, target)), _) => pairs.push(SentencePair {
                id: pairs.len(),
                source,
                target,
            }),
            (Err(reason), CleaningPolicy::Strict) => {
                return Err(CorpusError::Parse {
                    line: lineno,
                    reason,
                })
            }
            (Err(_), CleaningPolicy::Drop) => dropped += 1,
        }
    }
    Ok(LoadOutcome {
        corpus: ParallelCorpus {
            pairs,
            split,
            source_lang: "en".to_string(),
            target_lang: "hi".to_string(),
        },
        dropped,
    })
}

/// Padded id matrices with boolean masks; mask is true exactly where the id
/// is not pad, and every row ends with eos at its last unpadded position.
#[derive(Debug, Clone)]
pub struct Batch {
    pub source_ids: Vec<Vec<u32>>,
    pub target_ids: Vec<Vec<u32>>,
    pub source_mask: Vec<Vec<bool>>,
    pub target_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.source_ids.len()
    }
}

/// Tokenize, wrap in bos/eos, truncate to `max_len`, bucket by source length
/// in windows of [`BUCKET_WINDOW`] pairs, then pad within each batch. With a
/// seed the pair order is shuffled deterministically before bucketing.
pub fn make_batches(
    corpus: &ParallelCorpus,
    model: &SubwordModel,
    batch_size: usize,
    max_len: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    if batch_size < 1 {
        return Err(CorpusError::Config("batch_size must be >= 1".into()));
    }
    if max_len < 2 {
        return Err(CorpusError::Config(
            "max_len must be >= 2 (room for bos/eos)".into(),
        ));
    }
    let tokenized: Vec<(Vec<u32>, Vec<u32>)> = corpus
        .pairs
        .iter()
        .map(|p| {
            (
                model.encode(&p.source, true, Some(max_len)),
                model.encode(&p.target, true, Some(max_len)),
            )
        })
        .collect();

    let mut order: Vec<usize> = (0..tokenized.len()).collect();
    if let Some(seed) = shuffle_seed {
        Rng::substream(seed, 0).shuffle(&mut order);
    }
    for window in order.chunks_mut(BUCKET_WINDOW) {
        window.sort_by_key(|&i| (tokenized[i].0.len(), i));
    }

    let batches = order
        .chunks(batch_size)
        .map(|chunk| {
            let src_max = chunk.iter().map(|&i| tokenized[i].0.len()).max().unwrap();
            let tgt_max = chunk.iter().map(|&i| tokenized[i].1.len()).max().unwrap();
            let mut batch = Batch {
                source_ids: Vec::with_capacity(chunk.len()),
                target_ids: Vec::with_capacity(chunk.len()),
                source_mask: Vec::with_capacity(chunk.len()),
                target_mask: Vec::with_capacity(chunk.len()),
            };
            for &i in chunk {
                let (src, tgt) = &tokenized[i];
                batch.source_ids.push(pad_row(src, src_max));
                batch.source_mask.push(mask_row(src, src_max));
                batch.target_ids.push(pad_row(tgt, tgt_max));
                batch.target_mask.push(mask_row(tgt, tgt_max));
            }
            batch
        })
        .collect();
    Ok(batches)
}

fn pad_row(ids: &[u32], width: usize) -> Vec<u32> {
    let mut row = ids.to_vec();
    row.resize(width, PAD_ID);
    row
}

fn mask_row(ids: &[u32], width: usize) -> Vec<bool> {
    let mut row = vec![true; ids.len()];
    row.resize(width, false);
    row
}

/// Split name and pair count per corpus, for the statistics subcommand.
pub fn split_statistics<'a>(corpora: impl IntoIterator<Item = &'a ParallelCorpus>) -> BTreeMap<String, usize> {
    corpora
        .into_iter()
        .map(|c| (c.split.to_string(), c.len()))
        .collect()
}
