//! Translation edit rate with greedy block-shift search.

use super::{mt_tokenize, EvalPair};

/// Word-level Levenshtein distance, unit costs for insert/delete/substitute.
pub fn word_edit_distance(a: &[String], b: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn apply_shift(tokens: &[String], start: usize, len: usize, dest: usize) -> Vec<String> {
    let mut rest: Vec<String> = Vec::with_capacity(tokens.len() - len);
    rest.extend_from_slice(&tokens[..start]);
    rest.extend_from_slice(&tokens[start + len..]);
    let mut out: Vec<String> = Vec::with_capacity(tokens.len());
    out.extend_from_slice(&rest[..dest]);
    out.extend_from_slice(&tokens[start..start + len]);
    out.extend_from_slice(&rest[dest..]);
    out
}

/// Edits (insertions + deletions + substitutions + shifts) needed to turn
/// `hyp` into `reference`. Shifts are found greedily: the block move reducing
/// the remaining edit distance the most is applied and costs one edit; ties
/// prefer the smaller block, then the leftmost origin, then the leftmost
/// destination. The search stops after 10 * reference-length iterations.
pub fn ter_edits(hyp: &[String], reference: &[String]) -> usize {
    let mut current = hyp.to_vec();
    let mut shifts = 0usize;
    let cap = 10 * reference.len();
    for _ in 0..cap {
        let base = word_edit_distance(&current, reference);
        if base == 0 {
            break;
        }
        // (distance, block len, origin, dest)
        let mut best: Option<(usize, usize, usize, usize)> = None;
        for len in 1..=current.len() {
            for start in 0..=current.len() - len {
                for dest in 0..=current.len() - len {
                    if dest == start {
                        continue;
                    }
                    let moved = apply_shift(&current, start, len, dest);
                    let d = word_edit_distance(&moved, reference);
                    let cand = (d, len, start, dest);
                    if best.map_or(true, |b| cand < b) {
                        best = Some(cand);
                    }
                }
            }
        }
        match best {
            Some((d, len, start, dest)) if d < base => {
                current = apply_shift(&current, start, len, dest);
                shifts += 1;
            }
            _ => break,
        }
    }
    shifts + word_edit_distance(&current, reference)
}

/// Per-pair (edits, reference token count) over `mt_tokenize` output,
/// case-sensitive.
pub fn ter_pair(pair: &EvalPair) -> (usize, usize) {
    let hyp = mt_tokenize(&pair.hypothesis);
    let reference = mt_tokenize(&pair.reference);
    (ter_edits(&hyp, &reference), reference.len())
}

/// Corpus TER: total edits over total reference tokens, times 100.
pub fn ter(pairs: &[EvalPair]) -> f64 {
    let mut edits = 0usize;
    let mut ref_tokens = 0usize;
    for pair in pairs {
        let (e, r) = ter_pair(pair);
        edits += e;
        ref_tokens += r;
    }
    if ref_tokens == 0 {
        return 0.0;
    }
    100.0 * edits as f64 / ref_tokens as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        mt_tokenize(s)
    }

    #[test]
    fn identical_is_zero() {
        let pairs = vec![EvalPair::new("a b c", "a b c")];
        assert_eq!(ter(&pairs), 0.0);
    }

    #[test]
    fn substitution_without_shift() {
        let pairs = vec![EvalPair::new("a b x d", "a b c d")];
        assert!((ter(&pairs) - 25.0).abs() < 1e-9);
    }

    #[test]
    fn single_block_shift() {
        // moving "b c" after "a" leaves zero edit distance: 1 shift / 5 tokens
        let pairs = vec![EvalPair::new("a d e b c", "a b c d e")];
        assert!((ter(&pairs) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn shift_never_worse_than_levenshtein() {
        let cases = [
            ("a b c", "c b a"),
            ("x y z w", "w x y z"),
            ("a a b", "b a a"),
            ("p q", "q p r s"),
        ];
        for (h, r) in cases {
            let (edits, _) = ter_pair(&EvalPair::new(h, r));
            assert!(edits <= word_edit_distance(&toks(h), &toks(r)));
        }
    }

    #[test]
    fn empty_hypothesis_all_insertions() {
        let pairs = vec![EvalPair::new("", "a b c d")];
        assert!((ter(&pairs) - 100.0).abs() < 1e-9);
    }
}
