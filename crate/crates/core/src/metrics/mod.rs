//! String-based MT evaluation battery: corpus/sentence BLEU, chrF++, TER,
//! ROUGE-1/2/L and exact-match METEOR, plus report assembly.
//!
//! All metric functions are pure. Corpus pooling either sums integer counts
//! or sums per-pair floats in sorted order, so permuting the pair order never
//! changes a corpus score.

mod bleu;
mod chrf;
mod meteor;
mod report;
mod rouge;
mod ter;
mod tokenize;

pub use bleu::{bleu_corpus, sentence_bleu};
pub use chrf::chrf_pp;
pub use meteor::{meteor, meteor_with_params};
pub use report::{
    evaluate, evaluate_files, render_table, EvalReport, MetricMetadata, MetricsError,
    SentenceScores,
};
pub use rouge::{rouge_l, rouge_n, Prf};
pub use ter::{ter, ter_pair, word_edit_distance};
pub use tokenize::{latin_lowercase, mt_tokenize};

/// One hypothesis/reference segment. The reference must be non-empty; the
/// hypothesis may be empty (failed translations score zero, they do not
/// abort evaluation).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub hypothesis: String,
    pub reference: String,
}

impl EvalPair {
    pub fn new(hypothesis: impl Into<String>, reference: impl Into<String>) -> Self {
        EvalPair {
            hypothesis: hypothesis.into(),
            reference: reference.into(),
        }
    }
}

/// Sum in ascending value order: the result is independent of the original
/// ordering, which keeps corpus means invariant under pair permutation.
pub(crate) fn ordered_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

pub(crate) fn ordered_mean(values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    ordered_sum(values) / n
}

/// Multiset counts of token n-grams.
pub(crate) fn ngram_counts<T: Clone + std::hash::Hash + Eq>(
    items: &[T],
    n: usize,
) -> std::collections::HashMap<Vec<T>, usize> {
    let mut counts = std::collections::HashMap::new();
    if n == 0 || items.len() < n {
        return counts;
    }
    for window in items.windows(n) {
        *counts.entry(window.to_vec()).or_insert(0) += 1;
    }
    counts
}

/// Clipped overlap: candidate counts capped at reference counts.
pub(crate) fn clipped_matches<T: Clone + std::hash::Hash + Eq>(
    hyp: &std::collections::HashMap<Vec<T>, usize>,
    reference: &std::collections::HashMap<Vec<T>, usize>,
) -> usize {
    hyp.iter()
        .map(|(gram, &c)| c.min(reference.get(gram).copied().unwrap_or(0)))
        .sum()
}
