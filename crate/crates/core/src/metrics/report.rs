//! Report assembly: run the whole metric battery over aligned files and
//! serialize the result as JSON and as a results table.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    bleu_corpus, chrf_pp, meteor, rouge_l, rouge_n, sentence_bleu, ter, ter_pair, EvalPair, Prf,
};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("line count mismatch: hypothesis file has {hyp} lines, reference file has {reference}")]
    LineCountMismatch { hyp: usize, reference: usize },
    #[error("reference segment {line} is empty")]
    EmptyReference { line: usize },
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Every parameter that affects any score, recorded so results are
/// comparable across runs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricMetadata {
    pub tokenization: String,
    pub corpus_size: usize,
    pub bleu_max_n: usize,
    pub bleu_smoothing: String,
    pub chrf_char_order: usize,
    pub chrf_word_order: usize,
    pub chrf_beta: f64,
    pub ter_shift_search: String,
    pub ter_case: String,
    pub rouge_lowercase: String,
    pub meteor_stage: String,
    pub meteor_alpha: f64,
    pub meteor_beta: f64,
    pub meteor_gamma: f64,
}

impl MetricMetadata {
    fn standard(corpus_size: usize) -> Self {
        MetricMetadata {
            tokenization: "whitespace+unicode-punct-split (danda aware)".into(),
            corpus_size,
            bleu_max_n: super::bleu::MAX_N,
            bleu_smoothing: "none (corpus), exponential (sentence)".into(),
            chrf_char_order: super::chrf::CHAR_ORDER,
            chrf_word_order: super::chrf::WORD_ORDER,
            chrf_beta: super::chrf::BETA,
            ter_shift_search: "greedy best-first, cap 10*ref_len".into(),
            ter_case: "sensitive".into(),
            rouge_lowercase: "latin-script only (also applies to meteor)".into(),
            meteor_stage: "exact".into(),
            meteor_alpha: super::meteor::ALPHA,
            meteor_beta: super::meteor::BETA,
            meteor_gamma: super::meteor::GAMMA,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SentenceScores {
    pub bleu: f64,
    pub chrf_pp: f64,
    pub ter: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub meteor: f64,
}

/// Corpus scores for one system. BLEU and chrF++ live in [0,100], the ROUGE
/// F1 values and METEOR in [0,1], TER is >= 0.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub bleu: f64,
    pub chrf_pp: f64,
    pub ter: f64,
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
    pub meteor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_sentence: Option<Vec<SentenceScores>>,
    pub metadata: MetricMetadata,
}

/// Run every metric over the pair list.
pub fn evaluate(pairs: &[EvalPair], per_sentence: bool) -> Result<EvalReport, MetricsError> {
    for (i, pair) in pairs.iter().enumerate() {
        if pair.reference.trim().is_empty() {
            return Err(MetricsError::EmptyReference { line: i + 1 });
        }
    }
    let per_sentence = per_sentence.then(|| {
        pairs
            .iter()
            .map(|pair| {
                let one = std::slice::from_ref(pair);
                let (edits, ref_len) = ter_pair(pair);
                SentenceScores {
                    bleu: sentence_bleu(pair),
                    chrf_pp: chrf_pp(one),
                    ter: if ref_len == 0 {
                        0.0
                    } else {
                        100.0 * edits as f64 / ref_len as f64
                    },
                    rouge1: rouge_n(one, 1).f1,
                    rouge2: rouge_n(one, 2).f1,
                    rouge_l: rouge_l(one).f1,
                    meteor: meteor(one),
                }
            })
            .collect()
    });
    Ok(EvalReport {
        bleu: bleu_corpus(pairs),
        chrf_pp: chrf_pp(pairs),
        ter: ter(pairs),
        rouge1: rouge_n(pairs, 1),
        rouge2: rouge_n(pairs, 2),
        rouge_l: rouge_l(pairs),
        meteor: meteor(pairs),
        per_sentence,
        metadata: MetricMetadata::standard(pairs.len()),
    })
}

/// Evaluate two line-aligned UTF-8 files. A line-count mismatch is a hard
/// error; files are never silently truncated.
pub fn evaluate_files(
    hyp_path: &Path,
    ref_path: &Path,
    per_sentence: bool,
) -> Result<EvalReport, MetricsError> {
    let read = |path: &Path| -> Result<Vec<String>, MetricsError> {
        let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(text.lines().map(str::to_string).collect())
    };
    let hyp_lines = read(hyp_path)?;
    let ref_lines = read(ref_path)?;
    if hyp_lines.len() != ref_lines.len() {
        return Err(MetricsError::LineCountMismatch {
            hyp: hyp_lines.len(),
            reference: ref_lines.len(),
        });
    }
    let pairs: Vec<EvalPair> = hyp_lines
        .into_iter()
        .zip(ref_lines)
        .map(|(h, r)| EvalPair::new(h, r))
        .collect();
    evaluate(&pairs, per_sentence)
}

/// Aligned plain-text results table, one row per system. Column order follows
/// the standard leaderboard layout; the neural metrics this crate does not
/// compute render as "n/a".
pub fn render_table(rows: &[(String, &EvalReport)]) -> String {
    const HEADERS: [&str; 10] = [
        "Model",
        "BLEU",
        "chrF++",
        "TER",
        "ROUGE-1",
        "ROUGE-2",
        "ROUGE-L",
        "BERTScore(F1)",
        "METEOR",
        "COMET",
    ];
    let mut cells: Vec<Vec<String>> = vec![HEADERS.iter().map(|s| s.to_string()).collect()];
    for (name, report) in rows {
        cells.push(vec![
            name.clone(),
            format!("{:.2}", report.bleu),
            format!("{:.2}", report.chrf_pp),
            format!("{:.2}", report.ter),
            format!("{:.4}", report.rouge1.f1),
            format!("{:.4}", report.rouge2.f1),
            format!("{:.4}", report.rouge_l.f1),
            "n/a".to_string(),
            format!("{:.4}", report.meteor),
            "n/a".to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..HEADERS.len())
        .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap())
        .collect();
    let mut out = String::new();
    for row in &cells {
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                out.push_str("  ");
            }
            let _ = write!(out, "{cell:<width$}", width = widths[c]);
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn identical_files() {
        let text = "the cat sat on the mat .\nयह वाक्य है।\n";
        let hyp = write_temp(text);
        let reference = write_temp(text);
        let report = evaluate_files(hyp.path(), reference.path(), true).unwrap();
        assert!((report.bleu - 100.0).abs() < 1e-9);
        assert!((report.chrf_pp - 100.0).abs() < 1e-9);
        assert!(report.ter.abs() < 1e-12);
        assert!((report.rouge1.f1 - 1.0).abs() < 1e-12);
        assert_eq!(report.per_sentence.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn mismatched_line_counts() {
        let hyp = write_temp("a\nb\n");
        let reference = write_temp("a\n");
        let err = evaluate_files(hyp.path(), reference.path(), false).unwrap_err();
        match err {
            MetricsError::LineCountMismatch { hyp, reference } => {
                assert_eq!((hyp, reference), (2, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn table_column_order() {
        let pairs = vec![EvalPair::new("a b c d", "a b c d")];
        let report = evaluate(&pairs, false).unwrap();
        let table = render_table(&[("ours".to_string(), &report)]);
        let header = table.lines().next().unwrap();
        let cols: Vec<&str> = header.split_whitespace().collect();
        assert_eq!(
            cols,
            vec![
                "Model",
                "BLEU",
                "chrF++",
                "TER",
                "ROUGE-1",
                "ROUGE-2",
                "ROUGE-L",
                "BERTScore(F1)",
                "METEOR",
                "COMET"
            ]
        );
        assert!(table.contains("n/a"));
    }

    #[test]
    fn report_round_trips_through_json() {
        let pairs = vec![EvalPair::new("a b x", "a b c")];
        let report = evaluate(&pairs, true).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
