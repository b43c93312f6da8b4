//! ROUGE-N (clipped n-gram overlap) and ROUGE-L (longest common subsequence).

use serde::{Deserialize, Serialize};

use super::{clipped_matches, latin_lowercase, mt_tokenize, ngram_counts, ordered_mean, EvalPair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_pr(precision: f64, recall: f64) -> Prf {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }

    const ZERO: Prf = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
}

fn tokens(text: &str) -> Vec<String> {
    mt_tokenize(&latin_lowercase(text))
}

/// Mean over pairs of per-pair clipped n-gram precision/recall/F1. Pairs whose
/// reference has no n-grams of order `n` are skipped from the mean.
pub fn rouge_n(pairs: &[EvalPair], n: usize) -> Prf {
    assert!(n >= 1, "rouge_n requires n >= 1");
    let mut ps = Vec::new();
    let mut rs = Vec::new();
    let mut f1s = Vec::new();
    for pair in pairs {
        let hyp = ngram_counts(&tokens(&pair.hypothesis), n);
        let reference = ngram_counts(&tokens(&pair.reference), n);
        let ref_total: usize = reference.values().sum();
        if ref_total == 0 {
            continue;
        }
        let hyp_total: usize = hyp.values().sum();
        let matched = clipped_matches(&hyp, &reference) as f64;
        let p = if hyp_total > 0 {
            matched / hyp_total as f64
        } else {
            0.0
        };
        let r = matched / ref_total as f64;
        let prf = Prf::from_pr(p, r);
        ps.push(prf.precision);
        rs.push(prf.recall);
        f1s.push(prf.f1);
    }
    Prf {
        precision: ordered_mean(ps),
        recall: ordered_mean(rs),
        f1: ordered_mean(f1s),
    }
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L: per pair, precision and recall of the LCS length against the
/// hypothesis and reference lengths; corpus values are means over pairs.
pub fn rouge_l(pairs: &[EvalPair]) -> Prf {
    let mut ps = Vec::new();
    let mut rs = Vec::new();
    let mut f1s = Vec::new();
    for pair in pairs {
        let hyp = tokens(&pair.hypothesis);
        let reference = tokens(&pair.reference);
        let prf = if hyp.is_empty() || reference.is_empty() {
            Prf::ZERO
        } else {
            let l = lcs_len(&hyp, &reference) as f64;
            Prf::from_pr(l / hyp.len() as f64, l / reference.len() as f64)
        };
        ps.push(prf.precision);
        rs.push(prf.recall);
        f1s.push(prf.f1);
    }
    Prf {
        precision: ordered_mean(ps),
        recall: ordered_mean(rs),
        f1: ordered_mean(f1s),
    }
}
