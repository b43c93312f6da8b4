//! Byte-pair-encoding subword model: greedy merge training, encoding to ids
//! and decoding back to text.
//!
//! Word-initial characters carry a boundary marker prefix (U+2581), so
//! whitespace is never a token and decoding recovers word boundaries by
//! rewriting the marker to a space. Training is deterministic: the most
//! frequent adjacent pair wins each round, frequency ties broken by the
//! lexicographically smallest merged string.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_PIECES: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<s>", "</s>"];
const BOUNDARY: char = '\u{2581}';
/// Rendering of unknown pieces on decode, signalling coverage gaps.
pub const UNK_RENDER: &str = "\u{2047}";

#[derive(Debug, Error)]
pub enum SubwordError {
    #[error("vocab size {given} too small: need more than {needed} (specials + base symbols)")]
    VocabTooSmall { given: usize, needed: usize },
    #[error("training corpus is empty")]
    EmptyInput,
    #[error("token id {0} out of range for vocabulary of {1}")]
    IdOutOfRange(u32, usize),
    #[error("malformed model file at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct SubwordModel {
    pieces: Vec<String>,
    piece_ids: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    merge_ranks: HashMap<(String, String), usize>,
}

/// Token ids valid for one owning [`SubwordModel`].
pub type TokenSequence = Vec<u32>;

fn word_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                let mut s = String::with_capacity(8);
                s.push(BOUNDARY);
                s.push(c);
                s
            } else {
                c.to_string()
            }
        })
        .collect()
}

impl SubwordModel {
    /// Greedy BPE training over `texts`, stopping at `vocab_size` pieces or
    /// when no adjacent pair occurs twice.
    pub fn train<I, S>(texts: I, vocab_size: usize) -> Result<SubwordModel, SubwordError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut word_counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for word in text.as_ref().split_whitespace() {
                *word_counts.entry(word.to_string()).or_insert(0) += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(SubwordError::EmptyInput);
        }

        let mut words: Vec<(Vec<String>, u64)> = {
            let mut sorted: Vec<_> = word_counts.into_iter().collect();
            sorted.sort(); // deterministic layout regardless of hash order
            sorted
                .into_iter()
                .map(|(w, c)| (word_symbols(&w), c))
                .collect()
        };

        let mut base: Vec<String> = words
            .iter()
            .flat_map(|(symbols, _)| symbols.iter().cloned())
            .collect();
        base.sort();
        base.dedup();

        let needed = NUM_SPECIALS + base.len();
        if vocab_size <= needed {
            return Err(SubwordError::VocabTooSmall {
                given: vocab_size,
                needed,
            });
        }

        let mut pieces: Vec<String> = SPECIAL_PIECES.iter().map(|s| s.to_string()).collect();
        pieces.extend(base);
        let mut have: HashMap<String, u32> = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
        let mut merges: Vec<(String, String)> = Vec::new();

        while pieces.len() < vocab_size {
            let mut pair_counts: HashMap<(String, String), u64> = HashMap::new();
            for (symbols, count) in &words {
                for pair in symbols.windows(2) {
                    *pair_counts
                        .entry((pair[0].clone(), pair[1].clone()))
                        .or_insert(0) += count;
                }
            }
            // most frequent pair; ties by merged string, then by the pair
            let mut best: Option<(&(String, String), u64)> = None;
            for (pair, &count) in &pair_counts {
                if count < 2 {
                    continue;
                }
                let merged = format!("{}{}", pair.0, pair.1);
                if have.contains_key(&merged) {
                    continue;
                }
                best = match best {
                    None => Some((pair, count)),
                    Some((bp, bc)) => {
                        let bm = format!("{}{}", bp.0, bp.1);
                        if count > bc
                            || (count == bc && (merged.clone(), pair) < (bm.clone(), bp))
                        {
                            Some((pair, count))
                        } else {
                            Some((bp, bc))
                        }
                    }
                };
            }
            let Some((pair, _)) = best else { break };
            let pair = pair.clone();
            let merged = format!("{}{}", pair.0, pair.1);
            for (symbols, _) in &mut words {
                merge_in_place(symbols, &pair, &merged);
            }
            have.insert(merged.clone(), pieces.len() as u32);
            pieces.push(merged);
            merges.push(pair);
        }

        let merge_ranks = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Ok(SubwordModel {
            pieces,
            piece_ids: have,
            merges,
            merge_ranks,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Encode normalized text. With `add_markers` the result is
    /// `bos + ids + eos`; with `max_len` the sequence keeps its prefix and the
    /// final position is forced to eos.
    pub fn encode(&self, text: &str, add_markers: bool, max_len: Option<usize>) -> TokenSequence {
        let mut ids: TokenSequence = Vec::new();
        if add_markers {
            ids.push(BOS_ID);
        }
        for word in text.split_whitespace() {
            let mut symbols = word_symbols(word);
            loop {
                let mut best: Option<(usize, usize)> = None; // (rank, position)
                for (i, pair) in symbols.windows(2).enumerate() {
                    if let Some(&rank) =
                        self.merge_ranks.get(&(pair[0].clone(), pair[1].clone()))
                    {
                        if best.map_or(true, |(r, _)| rank < r) {
                            best = Some((rank, i));
                        }
                    }
                }
                let Some((_, i)) = best else { break };
                let merged = format!("{}{}", symbols[i], symbols[i + 1]);
                symbols[i] = merged;
                symbols.remove(i + 1);
            }
            for symbol in &symbols {
                ids.push(*self.piece_ids.get(symbol).unwrap_or(&UNK_ID));
            }
        }
        if add_markers {
            ids.push(EOS_ID);
        }
        if let Some(cap) = max_len {
            truncate_to(&mut ids, cap, add_markers);
        }
        ids
    }

    /// Concatenate pieces, rewrite boundary markers to spaces and strip
    /// specials. Unknown ids render as the replacement marker.
    pub fn decode(&self, ids: &[u32]) -> Result<String, SubwordError> {
        let mut joined = String::new();
        for &id in ids {
            let piece = self
                .pieces
                .get(id as usize)
                .ok_or(SubwordError::IdOutOfRange(id, self.pieces.len()))?;
            match id {
                PAD_ID | BOS_ID | EOS_ID => {}
                UNK_ID => joined.push_str(UNK_RENDER),
                _ => joined.push_str(piece),
            }
        }
        let text: String = joined
            .chars()
            .map(|c| if c == BOUNDARY { ' ' } else { c })
            .collect();
        Ok(text.trim_start().to_string())
    }

    // ---- model file ----

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "subword v1 {}", self.pieces.len());
        for (id, piece) in self.pieces.iter().enumerate() {
            let _ = writeln!(out, "{id}\t{piece}");
        }
        out.push_str("#merges\n");
        for (left, right) in &self.merges {
            let _ = writeln!(out, "{left}\t{right}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), SubwordError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn from_file_string(text: &str) -> Result<SubwordModel, SubwordError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(SubwordError::Parse {
            line: 1,
            reason: "empty file".into(),
        })?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "subword" || parts[1] != "v1" {
            return Err(SubwordError::Parse {
                line: 1,
                reason: format!("bad header {header:?}"),
            });
        }
        let vocab: usize = parts[2].parse().map_err(|_| SubwordError::Parse {
            line: 1,
            reason: "bad vocab size".into(),
        })?;
        let mut pieces: Vec<String> = Vec::with_capacity(vocab);
        let mut merges: Vec<(String, String)> = Vec::new();
        let mut in_merges = false;
        for (idx, line) in lines {
            if line == "#merges" {
                in_merges = true;
                continue;
            }
            let (a, b) = line.split_once('\t').ok_or_else(|| SubwordError::Parse {
                line: idx + 1,
                reason: "expected two tab-separated fields".into(),
            })?;
            if in_merges {
                merges.push((a.to_string(), b.to_string()));
            } else {
                let id: usize = a.parse().map_err(|_| SubwordError::Parse {
                    line: idx + 1,
                    reason: "bad id".into(),
                })?;
                if id != pieces.len() {
                    return Err(SubwordError::Parse {
                        line: idx + 1,
                        reason: format!("ids must be dense, got {id}"),
                    });
                }
                pieces.push(b.to_string());
            }
        }
        if pieces.len() != vocab {
            return Err(SubwordError::Parse {
                line: 1,
                reason: format!("header says {vocab} pieces, found {}", pieces.len()),
            });
        }
        let piece_ids = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
        let merge_ranks = merges
            .iter()
            .enumerate()
            .map(|(i, p): (usize, &(String, String))| (p.clone(), i))
            .collect();
        Ok(SubwordModel {
            pieces,
            piece_ids,
            merges,
            merge_ranks,
        })
    }

    pub fn load(path: &Path) -> Result<SubwordModel, SubwordError> {
        let text = std::fs::read_to_string(path)?;
        SubwordModel::from_file_string(&text)
    }

    /// SHA-256 of the serialized model, hex-encoded. Checkpoints record it so
    /// vocabulary drift between training and decoding is a hard error.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Keep the prefix; when the sequence is capped and carries markers, the last
/// kept position is forced to eos so decoder targets stay well-formed.
pub fn truncate_to(ids: &mut TokenSequence, max_len: usize, markers: bool) {
    if ids.len() > max_len {
        ids.truncate(max_len);
        if markers {
            if let Some(last) = ids.last_mut() {
                *last = EOS_ID;
            }
        }
    }
}

fn merge_in_place(symbols: &mut Vec<String>, pair: &(String, String), merged: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            symbols[i] = merged.to_string();
            symbols.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_merge_by_pair_count() {
        // "aa aa ab": pair (a,a) occurs twice, (a,b) once
        let model = SubwordModel::train(["aa aa ab"], NUM_SPECIALS + 3 + 1).unwrap();
        assert_eq!(model.merges()[0], ("\u{2581}a".to_string(), "a".to_string()));
    }

    #[test]
    fn single_char_words_learn_nothing() {
        let model = SubwordModel::train(["a a a"], 100).unwrap();
        assert!(model.merges().is_empty());
        assert_eq!(model.vocab_size(), NUM_SPECIALS + 1);
    }

    #[test]
    fn vocab_too_small() {
        assert!(matches!(
            SubwordModel::train(["abc def"], 5),
            Err(SubwordError::VocabTooSmall { .. })
        ));
    }

    #[test]
    fn empty_corpus() {
        let texts: [&str; 0] = [];
        assert!(matches!(
            SubwordModel::train(texts, 100),
            Err(SubwordError::EmptyInput)
        ));
    }

    #[test]
    fn round_trip() {
        let model = SubwordModel::train(["the cat sat on the mat", "a cat ate the hat"], 60).unwrap();
        for text in ["the cat sat", "a hat on the mat"] {
            let ids = model.encode(text, true, None);
            assert_eq!(model.decode(&ids).unwrap(), text);
        }
    }

    #[test]
    fn unknown_char_maps_to_unk() {
        let model = SubwordModel::train(["ab ab"], 20).unwrap();
        let ids = model.encode("aq", false, None);
        assert!(ids.contains(&UNK_ID));
        let text = model.decode(&ids).unwrap();
        assert!(text.contains(UNK_RENDER));
    }

    #[test]
    fn decode_specials_only() {
        let model = SubwordModel::train(["ab"], 8).unwrap();
        assert_eq!(model.decode(&[BOS_ID, EOS_ID]).unwrap(), "");
    }

    #[test]
    fn decode_out_of_range() {
        let model = SubwordModel::train(["ab"], 8).unwrap();
        assert!(matches!(
            model.decode(&[999]),
            Err(SubwordError::IdOutOfRange(999, _))
        ));
    }

    #[test]
    fn truncation_forces_eos() {
        let model = SubwordModel::train(["a b c d e f g h"], 20).unwrap();
        let ids = model.encode("a b c d e f g h", true, Some(4));
        assert_eq!(ids.len(), 4);
        assert_eq!(*ids.last().unwrap(), EOS_ID);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["low lower lowest", "new newer newest", "wide wider widest"];
        let a = SubwordModel::train(corpus, 50).unwrap();
        let b = SubwordModel::train(corpus, 50).unwrap();
        assert_eq!(a.to_file_string(), b.to_file_string());
    }

    #[test]
    fn file_round_trip() {
        let model = SubwordModel::train(["hello world", "hello there"], 40).unwrap();
        let text = model.to_file_string();
        let reloaded = SubwordModel::from_file_string(&text).unwrap();
        assert_eq!(reloaded.to_file_string(), text);
        assert_eq!(
            reloaded.encode("hello world", true, None),
            model.encode("hello world", true, None)
        );
    }

    #[test]
    fn monotone_coverage() {
        let corpus = ["the quick brown fox jumps over the lazy dog the end"];
        let small = SubwordModel::train(corpus, 40).unwrap();
        let large = SubwordModel::train(corpus, 60).unwrap();
        for sentence in corpus {
            assert!(
                large.encode(sentence, false, None).len()
                    <= small.encode(sentence, false, None).len()
            );
        }
    }
}
