//! Property-based invariants for normalization, subword coding, batching
//! and metric ranges.

use proptest::prelude::*;

use mtkit_core::corpus::{make_batches, normalize_text, ParallelCorpus, SentencePair, Split};
use mtkit_core::metrics::{bleu_corpus, chrf_pp, meteor, rouge_n, ter, EvalPair};
use mtkit_core::subword::{SubwordModel, PAD_ID};

fn word() -> impl Strategy<Value = String> {
    proptest::string::string_regex("[a-f]{1,6}").unwrap()
}

fn sentence() -> impl Strategy<Value = String> {
    proptest::collection::vec(word(), 1..8).prop_map(|ws| ws.join(" "))
}

fn corpus(pairs: usize) -> impl Strategy<Value = Vec<(String, String)>> {
    proptest::collection::vec((sentence(), sentence()), 1..=pairs)
}

proptest! {
    #[test]
    fn normalization_is_idempotent(s in "\\PC{0,40}") {
        let once = normalize_text(&s);
        prop_assert_eq!(normalize_text(&once), once.clone());
        prop_assert!(!once.contains("  "));
        prop_assert!(!once.chars().any(char::is_control));
        prop_assert_eq!(once.trim(), once.as_str());
    }

    #[test]
    fn subword_round_trips_training_text(sentences in proptest::collection::vec(sentence(), 1..6)) {
        let model = SubwordModel::train(sentences.iter().map(String::as_str), 40).unwrap();
        for s in &sentences {
            let ids = model.encode(s, true, None);
            let back = model.decode(&ids).unwrap();
            prop_assert_eq!(back, normalize_text(s));
        }
    }

    #[test]
    fn subword_training_is_deterministic(sentences in proptest::collection::vec(sentence(), 1..6)) {
        let a = SubwordModel::train(sentences.iter().map(String::as_str), 40).unwrap();
        let b = SubwordModel::train(sentences.iter().map(String::as_str), 40).unwrap();
        prop_assert_eq!(a.to_file_string(), b.to_file_string());
        prop_assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn batch_masks_mirror_padding(raw in corpus(12), batch_size in 1usize..5) {
        let pairs: Vec<SentencePair> = raw.iter().enumerate().map(|(i, (s, t))| SentencePair {
            id: i,
            source: normalize_text(s),
            target: normalize_text(t),
        }).collect();
        let corpus = ParallelCorpus {
            pairs,
            split: Split::Train,
            source_lang: "en".into(),
            target_lang: "hi".into(),
        };
        let texts: Vec<&str> = raw.iter().flat_map(|(s, t)| [s.as_str(), t.as_str()]).collect();
        let model = SubwordModel::train(texts, 40).unwrap();
        let batches = make_batches(&corpus, &model, batch_size, 16, Some(9)).unwrap();
        let mut rows = 0usize;
        for batch in &batches {
            rows += batch.rows();
            for (ids, mask) in batch.source_ids.iter().zip(&batch.source_mask)
                .chain(batch.target_ids.iter().zip(&batch.target_mask)) {
                prop_assert_eq!(ids.len(), mask.len());
                for (&id, &keep) in ids.iter().zip(mask) {
                    prop_assert_eq!(keep, id != PAD_ID);
                }
            }
        }
        prop_assert_eq!(rows, corpus.len());
    }

    #[test]
    fn metric_scores_stay_in_declared_ranges(raw in corpus(6)) {
        let pairs: Vec<EvalPair> = raw.iter()
            .map(|(h, r)| EvalPair::new(h.clone(), r.clone()))
            .collect();
        let bleu = bleu_corpus(&pairs);
        let chrf = chrf_pp(&pairs);
        let t = ter(&pairs);
        let rouge = rouge_n(&pairs, 1);
        let m = meteor(&pairs);
        prop_assert!((0.0..=100.0).contains(&bleu));
        prop_assert!((0.0..=100.0).contains(&chrf));
        prop_assert!(t >= 0.0 && t.is_finite());
        for v in [rouge.precision, rouge.recall, rouge.f1, m] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn corpus_scores_ignore_pair_order(raw in corpus(6), seed in 0u64..1000) {
        let pairs: Vec<EvalPair> = raw.iter()
            .map(|(h, r)| EvalPair::new(h.clone(), r.clone()))
            .collect();
        let mut shuffled = pairs.clone();
        let mut rng = mtkit_core::rng::Rng::new(seed);
        rng.shuffle(&mut shuffled);
        prop_assert_eq!(bleu_corpus(&pairs), bleu_corpus(&shuffled));
        prop_assert_eq!(chrf_pp(&pairs), chrf_pp(&shuffled));
        prop_assert_eq!(ter(&pairs), ter(&shuffled));
        prop_assert_eq!(rouge_n(&pairs, 1).f1, rouge_n(&shuffled, 1).f1);
        prop_assert_eq!(meteor(&pairs), meteor(&shuffled));
    }
}
