//! chrF++: character n-gram F-score augmented with word n-gram statistics.

use super::{clipped_matches, mt_tokenize, ngram_counts, EvalPair};

pub const CHAR_ORDER: usize = 6;
pub const WORD_ORDER: usize = 2;
pub const BETA: f64 = 2.0;

/// chrF++ over a corpus: per order, matches and totals pool over all pairs;
/// precision and recall are macro-averaged over the char orders 1..6 and word
/// orders 1..2 (orders with no reference n-grams anywhere are skipped), then
/// combined as F_beta with beta=2, times 100.
pub fn chrf_pp(pairs: &[EvalPair]) -> f64 {
    const ORDERS: usize = CHAR_ORDER + WORD_ORDER;
    let mut matches = [0usize; ORDERS];
    let mut hyp_totals = [0usize; ORDERS];
    let mut ref_totals = [0usize; ORDERS];

    for pair in pairs {
        let hyp_chars: Vec<char> = pair
            .hypothesis
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect();
        let ref_chars: Vec<char> = pair
            .reference
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect();
        for n in 1..=CHAR_ORDER {
            let h = ngram_counts(&hyp_chars, n);
            let r = ngram_counts(&ref_chars, n);
            matches[n - 1] += clipped_matches(&h, &r);
            hyp_totals[n - 1] += h.values().sum::<usize>();
            ref_totals[n - 1] += r.values().sum::<usize>();
        }
        let hyp_words = mt_tokenize(&pair.hypothesis);
        let ref_words = mt_tokenize(&pair.reference);
        for n in 1..=WORD_ORDER {
            let h = ngram_counts(&hyp_words, n);
            let r = ngram_counts(&ref_words, n);
            let slot = CHAR_ORDER + n - 1;
            matches[slot] += clipped_matches(&h, &r);
            hyp_totals[slot] += h.values().sum::<usize>();
            ref_totals[slot] += r.values().sum::<usize>();
        }
    }

    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut included = 0usize;
    for o in 0..ORDERS {
        if ref_totals[o] == 0 {
            continue;
        }
        included += 1;
        if hyp_totals[o] > 0 {
            p_sum += matches[o] as f64 / hyp_totals[o] as f64;
        }
        r_sum += matches[o] as f64 / ref_totals[o] as f64;
    }
    if included == 0 {
        return 0.0;
    }
    let p = p_sum / included as f64;
    let r = r_sum / included as f64;
    let denom = BETA * BETA * p + r;
    if denom == 0.0 {
        return 0.0;
    }
    100.0 * (1.0 + BETA * BETA) * p * r / denom
}
