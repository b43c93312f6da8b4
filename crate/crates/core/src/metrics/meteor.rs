//! METEOR, exact-match stage: unigram alignment with a fragmentation penalty.

use std::collections::BTreeMap;

use super::{latin_lowercase, mt_tokenize, EvalPair};

pub const ALPHA: f64 = 0.9;
pub const BETA: f64 = 3.0;
pub const GAMMA: f64 = 0.5;

/// Give up on exhaustive occurrence-assignment search above this many
/// candidate alignments and fall back to in-order pairing.
const SEARCH_CAP: u64 = 50_000;

#[derive(Debug, Clone, Copy)]
struct AlignmentStats {
    matches: usize,
    chunks: usize,
    hyp_len: usize,
    ref_len: usize,
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

fn binomial(n: usize, k: usize) -> u64 {
    let mut result = 1u64;
    for i in 0..k {
        result = result.saturating_mul((n - i) as u64) / (i + 1) as u64;
    }
    result
}

fn crossings(links: &[(usize, usize)]) -> usize {
    let mut count = 0;
    for i in 0..links.len() {
        for j in i + 1..links.len() {
            if (links[i].0 < links[j].0) != (links[i].1 < links[j].1) {
                count += 1;
            }
        }
    }
    count
}

fn chunk_count(links: &mut Vec<(usize, usize)>) -> usize {
    links.sort();
    let mut chunks = 0;
    for (i, link) in links.iter().enumerate() {
        if i == 0 || links[i - 1].0 + 1 != link.0 || links[i - 1].1 + 1 != link.1 {
            chunks += 1;
        }
    }
    chunks
}

/// Maximal exact unigram alignment: every shared word contributes
/// min(occurrences) links; among the maximum-size alignments the one with the
/// fewest crossing links is chosen. Within one word, occurrences always pair
/// in order (uncrossing two same-word links never adds crossings elsewhere).
fn align(hyp: &[String], reference: &[String]) -> AlignmentStats {
    let mut occurrences: BTreeMap<&String, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, w) in hyp.iter().enumerate() {
        occurrences.entry(w).or_default().0.push(i);
    }
    for (j, w) in reference.iter().enumerate() {
        occurrences.entry(w).or_default().1.push(j);
    }
    let groups: Vec<(&Vec<usize>, &Vec<usize>, usize)> = occurrences
        .values()
        .filter(|(h, r)| !h.is_empty() && !r.is_empty())
        .map(|(h, r)| (h, r, h.len().min(r.len())))
        .collect();
    let matches: usize = groups.iter().map(|(_, _, k)| k).sum();
    if matches == 0 {
        return AlignmentStats {
            matches: 0,
            chunks: 0,
            hyp_len: hyp.len(),
            ref_len: reference.len(),
        };
    }

    let total_combos: u64 = groups.iter().fold(1u64, |acc, (h, r, k)| {
        acc.saturating_mul(binomial(h.len(), *k).saturating_mul(binomial(r.len(), *k)))
    });

    let best_links = if total_combos <= SEARCH_CAP {
        let per_group: Vec<Vec<Vec<(usize, usize)>>> = groups
            .iter()
            .map(|(h, r, k)| {
                let mut options = Vec::new();
                for hs in combinations(h.len(), *k) {
                    for rs in combinations(r.len(), *k) {
                        options.push(
                            hs.iter()
                                .zip(&rs)
                                .map(|(&hi, &ri)| (h[hi], r[ri]))
                                .collect(),
                        );
                    }
                }
                options
            })
            .collect();
        let mut best: Option<(usize, Vec<(usize, usize)>)> = None;
        let mut stack: Vec<(usize, Vec<(usize, usize)>)> = vec![(0, Vec::new())];
        while let Some((depth, links)) = stack.pop() {
            if depth == per_group.len() {
                let c = crossings(&links);
                if best.as_ref().map_or(true, |(bc, _)| c < *bc) {
                    best = Some((c, links));
                }
                continue;
            }
            // push in reverse so the first option is explored first
            for option in per_group[depth].iter().rev() {
                let mut next = links.clone();
                next.extend_from_slice(option);
                stack.push((depth + 1, next));
            }
        }
        best.unwrap().1
    } else {
        groups
            .iter()
            .flat_map(|(h, r, k)| h.iter().zip(r.iter()).take(*k).map(|(&a, &b)| (a, b)))
            .collect()
    };

    let mut links = best_links;
    let chunks = chunk_count(&mut links);
    AlignmentStats {
        matches,
        chunks,
        hyp_len: hyp.len(),
        ref_len: reference.len(),
    }
}

/// METEOR with explicit parameters. Corpus scoring aggregates matches,
/// lengths and chunk counts over all pairs before applying the formulas.
pub fn meteor_with_params(pairs: &[EvalPair], alpha: f64, beta: f64, gamma: f64) -> f64 {
    let mut matches = 0usize;
    let mut chunks = 0usize;
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for pair in pairs {
        let hyp = mt_tokenize(&latin_lowercase(&pair.hypothesis));
        let reference = mt_tokenize(&latin_lowercase(&pair.reference));
        let stats = align(&hyp, &reference);
        matches += stats.matches;
        chunks += stats.chunks;
        hyp_len += stats.hyp_len;
        ref_len += stats.ref_len;
    }
    if matches == 0 || hyp_len == 0 || ref_len == 0 {
        return 0.0;
    }
    let p = matches as f64 / hyp_len as f64;
    let r = matches as f64 / ref_len as f64;
    let denom = alpha * p + (1.0 - alpha) * r;
    if denom == 0.0 {
        return 0.0;
    }
    let f_mean = p * r / denom;
    let penalty = gamma * (chunks as f64 / matches as f64).powf(beta);
    f_mean * (1.0 - penalty)
}

/// METEOR with the standard exact-match parameters (alpha 0.9, beta 3,
/// gamma 0.5).
pub fn meteor(pairs: &[EvalPair]) -> f64 {
    meteor_with_params(pairs, ALPHA, BETA, GAMMA)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_ten_tokens() {
        let s = "a b c d e f g h i j";
        let got = meteor(&[EvalPair::new(s, s)]);
        assert!((got - 0.9995).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn identical_single_token_hits_penalty_floor() {
        let got = meteor(&[EvalPair::new("hello", "hello")]);
        assert!((got - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_overlap_is_zero() {
        assert_eq!(meteor(&[EvalPair::new("x y", "a b")]), 0.0);
    }

    #[test]
    fn fragmentation_increases_penalty() {
        // same matches, different order: more chunks, lower score
        let contiguous = meteor(&[EvalPair::new("a b c d", "a b c d")]);
        let scrambled = meteor(&[EvalPair::new("c d a b", "a b c d")]);
        assert!(scrambled < contiguous);
    }

    #[test]
    fn alignment_prefers_fewer_crossings() {
        // hyp "a b a", ref "a b": one "a" link; pairing hyp[0] with ref[0]
        // has zero crossings and yields one chunk "a b"
        let hyp: Vec<String> = ["a", "b", "a"].iter().map(|s| s.to_string()).collect();
        let reference: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let stats = align(&hyp, &reference);
        assert_eq!(stats.matches, 2);
        assert_eq!(stats.chunks, 1);
    }

    #[test]
    fn empty_hypothesis_scores_zero() {
        assert_eq!(meteor(&[EvalPair::new("", "a b c")]), 0.0);
    }
}
