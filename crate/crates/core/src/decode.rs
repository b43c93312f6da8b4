//! Decoding: greedy search and length-normalized beam search.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, TransformerModel};
use crate::subword::{SubwordModel, BOS_ID, EOS_ID};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error("scorer returned {got} log-probs, expected {expected}")]
    VocabMismatch { got: usize, expected: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
    /// Length-normalization exponent: hypotheses are ranked by
    /// log_prob / len^alpha.
    pub length_alpha: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 4,
            max_len: 256,
            length_alpha: 0.6,
        }
    }
}

impl DecodeConfig {
    fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 {
            return Err(DecodeError::Config("beam_size must be >= 1".into()));
        }
        if self.max_len < 2 {
            return Err(DecodeError::Config("max_len must be >= 2".into()));
        }
        Ok(())
    }
}

/// A decoded target sequence including its begin marker and, when
/// `finished`, a final end marker.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<u32>,
    pub log_prob: f64,
    pub score: f64,
    pub finished: bool,
}

/// Next-token distribution for one source sentence given a target prefix.
pub trait Seq2SeqScorer {
    fn vocab_size(&self) -> usize;
    /// Log-probabilities over the vocabulary for the token following
    /// `prefix`; `prefix` always starts with the begin marker.
    fn next_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>, DecodeError>;
}

/// Scorer backed by a full forward pass per step.
pub struct ModelScorer<'a> {
    model: &'a TransformerModel,
    src_ids: Vec<u32>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a TransformerModel, src_ids: Vec<u32>) -> ModelScorer<'a> {
        ModelScorer { model, src_ids }
    }
}

impl Seq2SeqScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.cfg.vocab_size
    }

    fn next_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>, DecodeError> {
        let src = std::slice::from_ref(&self.src_ids);
        let src_mask = vec![vec![true; self.src_ids.len()]];
        let tgt = vec![prefix.to_vec()];
        let tgt_mask = vec![vec![true; prefix.len()]];
        let logits = self.model.forward(src, &src_mask, &tgt, &tgt_mask)?;
        let vocab = self.model.cfg.vocab_size;
        let row = logits.with_data(|data| data[(prefix.len() - 1) * vocab..].to_vec());
        Ok(log_softmax(&row))
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&x| x - log_z).collect()
}

fn check_vocab(lp: &[f64], expected: usize) -> Result<(), DecodeError> {
    if lp.len() != expected {
        return Err(DecodeError::VocabMismatch {
            got: lp.len(),
            expected,
        });
    }
    Ok(())
}

/// Ranking score: log-probability normalized by generated length (tokens
/// after the begin marker) raised to `alpha`.
fn length_normalized(log_prob: f64, generated: usize, alpha: f64) -> f64 {
    log_prob / (generated.max(1) as f64).powf(alpha)
}

/// Greedy search: the argmax token at each step, lowest id on exact ties.
pub fn greedy_decode(
    scorer: &dyn Seq2SeqScorer,
    cfg: &DecodeConfig,
) -> Result<Hypothesis, DecodeError> {
    cfg.validate()?;
    let mut ids = vec![BOS_ID];
    let mut log_prob = 0.0;
    let mut finished = false;
    while ids.len() < cfg.max_len {
        let lp = scorer.next_log_probs(&ids)?;
        check_vocab(&lp, scorer.vocab_size())?;
        let (token, best) = lp
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        ids.push(token as u32);
        log_prob += best;
        if token as u32 == EOS_ID {
            finished = true;
            break;
        }
    }
    let score = length_normalized(log_prob, ids.len() - 1, cfg.length_alpha);
    Ok(Hypothesis {
        ids,
        log_prob,
        score,
        finished,
    })
}

/// Beam search. Candidate ties break by score (descending), then token id
/// (ascending), then parent beam index (ascending). Finished hypotheses
/// enter a pool ranked by length-normalized score; if nothing finishes
/// within `max_len` the best unfinished beam is returned with
/// `finished: false`.
pub fn beam_decode(
    scorer: &dyn Seq2SeqScorer,
    cfg: &DecodeConfig,
) -> Result<Hypothesis, DecodeError> {
    cfg.validate()?;
    struct Beam {
        ids: Vec<u32>,
        log_prob: f64,
    }
    let mut beams = vec![Beam {
        ids: vec![BOS_ID],
        log_prob: 0.0,
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();
    while !beams.is_empty() && beams[0].ids.len() < cfg.max_len {
        // (candidate score, token, parent)
        let mut candidates: Vec<(f64, u32, usize)> = Vec::new();
        for (parent, beam) in beams.iter().enumerate() {
            let lp = scorer.next_log_probs(&beam.ids)?;
            check_vocab(&lp, scorer.vocab_size())?;
            for (token, &p) in lp.iter().enumerate() {
                candidates.push((beam.log_prob + p, token as u32, parent));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(cfg.beam_size);
        for &(log_prob, token, parent) in &candidates {
            if next.len() == cfg.beam_size {
                break;
            }
            let mut ids = beams[parent].ids.clone();
            ids.push(token);
            if token == EOS_ID {
                let score = length_normalized(log_prob, ids.len() - 1, cfg.length_alpha);
                pool.push(Hypothesis {
                    ids,
                    log_prob,
                    score,
                    finished: true,
                });
            } else {
                next.push(Beam { ids, log_prob });
            }
        }
        // a full pool of finished hypotheses cannot be beaten once every
        // live beam already scores worse than the pool's best
        if pool.len() >= cfg.beam_size {
            break;
        }
        beams = next;
    }
    let best_finished = pool.into_iter().max_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then_with(|| b.ids.cmp(&a.ids))
    });
    if let Some(best) = best_finished {
        return Ok(best);
    }
    let best = beams
        .into_iter()
        .max_by(|a, b| a.log_prob.total_cmp(&b.log_prob))
        .expect("beam search always keeps at least one live beam");
    let score = length_normalized(best.log_prob, best.ids.len() - 1, cfg.length_alpha);
    Ok(Hypothesis {
        ids: best.ids,
        log_prob: best.log_prob,
        score,
        finished: false,
    })
}

pub struct TranslationOutcome {
    pub translations: Vec<String>,
    /// Sentences that failed to decode; their output slot is an empty string.
    pub failures: usize,
}

/// Translate every source line. Decode failures never abort the run: the
/// sentence renders as an empty string and is counted.
pub fn translate_corpus(
    model: &TransformerModel,
    subword: &SubwordModel,
    sources: &[String],
    cfg: &DecodeConfig,
) -> TranslationOutcome {
    let mut translations = Vec::with_capacity(sources.len());
    let mut failures = 0usize;
    for source in sources {
        let src_ids = subword.encode(source, true, Some(model.cfg.max_len));
        let scorer = ModelScorer::new(model, src_ids);
        let decoded = beam_decode(&scorer, cfg).and_then(|hyp| {
            subword
                .decode(&hyp.ids)
                .map_err(|_| DecodeError::Config("undecodable output ids".into()))
        });
        match decoded {
            Ok(text) => translations.push(text),
            Err(_) => {
                translations.push(String::new());
                failures += 1;
            }
        }
    }
    TranslationOutcome {
        translations,
        failures,
    }
}
