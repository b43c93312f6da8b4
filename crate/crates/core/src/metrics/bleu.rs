//! Corpus BLEU (no smoothing) and sentence BLEU (exponential smoothing).

use super::{clipped_matches, mt_tokenize, ngram_counts, EvalPair};

pub const MAX_N: usize = 4;

struct NgramStats {
    matches: [usize; MAX_N],
    totals: [usize; MAX_N],
    hyp_len: usize,
    ref_len: usize,
}

fn pair_stats(pair: &EvalPair) -> NgramStats {
    let hyp = mt_tokenize(&pair.hypothesis);
    let reference = mt_tokenize(&pair.reference);
    let mut stats = NgramStats {
        matches: [0; MAX_N],
        totals: [0; MAX_N],
        hyp_len: hyp.len(),
        ref_len: reference.len(),
    };
    for n in 1..=MAX_N {
        let h = ngram_counts(&hyp, n);
        let r = ngram_counts(&reference, n);
        stats.matches[n - 1] = clipped_matches(&h, &r);
        stats.totals[n - 1] = h.values().sum();
    }
    stats
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Corpus BLEU: clipped modified n-gram precisions pooled over the corpus,
/// geometric mean over n=1..4, times the brevity penalty, times 100. Zero if
/// any pooled precision is zero (no corpus-level smoothing).
pub fn bleu_corpus(pairs: &[EvalPair]) -> f64 {
    let mut matches = [0usize; MAX_N];
    let mut totals = [0usize; MAX_N];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for pair in pairs {
        let s = pair_stats(pair);
        for n in 0..MAX_N {
            matches[n] += s.matches[n];
            totals[n] += s.totals[n];
        }
        hyp_len += s.hyp_len;
        ref_len += s.ref_len;
    }
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_N {
        if matches[n] == 0 || totals[n] == 0 {
            return 0.0;
        }
        log_sum += (matches[n] as f64 / totals[n] as f64).ln();
    }
    100.0 * brevity_penalty(hyp_len, ref_len) * (log_sum / MAX_N as f64).exp()
}

/// Sentence BLEU with exponential smoothing: the k-th precision that comes
/// out zero is replaced by 1/(2^k * c_n), where c_n is the candidate n-gram
/// count (floored at one).
pub fn sentence_bleu(pair: &EvalPair) -> f64 {
    let s = pair_stats(pair);
    if s.hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut zeros = 0u32;
    for n in 0..MAX_N {
        let p = if s.matches[n] > 0 {
            s.matches[n] as f64 / s.totals[n] as f64
        } else {
            zeros += 1;
            1.0 / (f64::from(2u32.pow(zeros)) * s.totals[n].max(1) as f64)
        };
        log_sum += p.ln();
    }
    100.0 * brevity_penalty(s.hyp_len, s.ref_len) * (log_sum / MAX_N as f64).exp()
}
