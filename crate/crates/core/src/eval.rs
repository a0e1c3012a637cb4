//! Word error rate and corpus evaluation.
//!
//! Text is case-folded and stripped of punctuation before comparison, on
//! both sides identically. Corpus WER is pooled: total edit operations
//! over total reference words, not a mean of per-utterance rates.

use std::path::Path;

use rayon::prelude::*;

use crate::audio::{features_for_file, FrontendConfig};
use crate::error::Result;
use crate::manifest::ManifestEntry;
use crate::model::{greedy_decode, ModelConfig};
use crate::params::ParamStore;
use crate::tokenizer::Vocab;

/// Lowercases and replaces every non-alphanumeric character with a space.
pub fn normalize_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if c.is_alphanumeric() {
            out.extend(c.to_lowercase());
        } else {
            out.push(' ');
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WerStats {
    pub edits: usize,
    pub ref_words: usize,
    pub wer: f64,
}

/// Word-level Levenshtein distance with unit costs, O(min) memory.
fn levenshtein(a: &[&str], b: &[&str]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut cur = vec![0usize; short.len() + 1];
    for (i, lw) in long.iter().enumerate() {
        cur[0] = i + 1;
        for (j, sw) in short.iter().enumerate() {
            let sub = prev[j] + usize::from(lw != sw);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

pub fn wer_stats(reference: &str, hypothesis: &str) -> WerStats {
    let r = normalize_text(reference);
    let h = normalize_text(hypothesis);
    let r_words: Vec<&str> = r.split_whitespace().collect();
    let h_words: Vec<&str> = h.split_whitespace().collect();
    let edits = levenshtein(&r_words, &h_words);
    WerStats {
        edits,
        ref_words: r_words.len(),
        wer: edits as f64 / r_words.len().max(1) as f64,
    }
}

/// Levenshtein word distance over the reference word count (floor 1).
pub fn wer(reference: &str, hypothesis: &str) -> f64 {
    wer_stats(reference, hypothesis).wer
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub audio: String,
    pub reference: String,
    pub hypothesis: String,
    pub wer: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub skipped: Vec<String>,
    pub total_edits: usize,
    pub total_ref_words: usize,
    pub pooled_wer: f64,
}

/// Transcribes every manifest entry and pools the word error rate.
/// Missing or unreadable audio files are listed in `skipped` rather than
/// failing the whole run; rows keep manifest order.
pub fn evaluate(
    entries: &[ManifestEntry],
    manifest_dir: &Path,
    store: &ParamStore,
    model_cfg: &ModelConfig,
    vocab: &Vocab,
    frontend: &FrontendConfig,
) -> Result<EvalReport> {
    enum Outcome {
        Row(EvalRow),
        Skipped(String),
    }
    let outcomes: Vec<Result<Outcome>> = entries
        .par_iter()
        .map(|e| {
            let path = e.audio_path(manifest_dir);
            let mel = match features_for_file(&path, frontend) {
                Ok(mel) => mel,
                Err(crate::Error::Io { path, .. }) => {
                    return Ok(Outcome::Skipped(path.display().to_string()))
                }
                Err(other) => return Err(other),
            };
            let ids = greedy_decode(store, model_cfg, vocab, &mel, model_cfg.max_text_len)?;
            let hyp = vocab.decode_string(&ids)?;
            let stats = wer_stats(&e.text, &hyp);
            Ok(Outcome::Row(EvalRow {
                audio: e.audio.clone(),
                reference: e.text.clone(),
                hypothesis: hyp,
                wer: stats.wer,
            }))
        })
        .collect();

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut total_edits = 0;
    let mut total_ref_words = 0;
    for o in outcomes {
        match o? {
            Outcome::Row(row) => {
                let stats = wer_stats(&row.reference, &row.hypothesis);
                total_edits += stats.edits;
                total_ref_words += stats.ref_words;
                rows.push(row);
            }
            Outcome::Skipped(path) => skipped.push(path),
        }
    }
    Ok(EvalReport {
        rows,
        skipped,
        total_edits,
        total_ref_words,
        pooled_wer: total_edits as f64 / total_ref_words.max(1) as f64,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn report_to_csv(report: &EvalReport) -> String {
    let mut out = String::from("audio,ref,hyp,wer\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{:.6}\n",
            csv_field(&row.audio),
            csv_field(&row.reference),
            csv_field(&row.hypothesis),
            row.wer
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_strings_are_zero() {
        assert_eq!(wer("hello world", "hello world"), 0.0);
        assert_eq!(wer("Hello, World!", "hello world"), 0.0);
    }

    #[test]
    fn single_substitution() {
        let s = wer_stats("a b c", "a x c");
        assert_eq!(s.edits, 1);
        assert_eq!(s.ref_words, 3);
        assert!((s.wer - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_reference_floors_denominator() {
        assert_eq!(wer("", "a"), 1.0);
        assert_eq!(wer("", ""), 0.0);
    }

    #[test]
    fn insertions_and_deletions_count() {
        assert_eq!(wer_stats("a b", "a b c").edits, 1);
        assert_eq!(wer_stats("a b c", "a c").edits, 1);
    }

    #[test]
    fn wer_matches_full_dp_oracle() {
        // Independent quadratic-memory DP, straight from the recurrence.
        fn oracle(a: &[&str], b: &[&str]) -> usize {
            let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
            for (i, row) in d.iter_mut().enumerate() {
                row[0] = i;
            }
            for j in 0..=b.len() {
                d[0][j] = j;
            }
            for i in 1..=a.len() {
                for j in 1..=b.len() {
                    let c = usize::from(a[i - 1] != b[j - 1]);
                    d[i][j] = (d[i - 1][j] + 1)
                        .min(d[i][j - 1] + 1)
                        .min(d[i - 1][j - 1] + c);
                }
            }
            d[a.len()][b.len()]
        }

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20);
        let words = ["one", "two", "three", "four", "five", "six"];
        for _ in 0..1000 {
            let pick = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<&str> {
                let n = rng.random_range(0..8);
                (0..n).map(|_| words[rng.random_range(0..words.len())]).collect()
            };
            let a = pick(&mut rng);
            let b = pick(&mut rng);
            let got = wer_stats(&a.join(" "), &b.join(" ")).edits;
            assert_eq!(got, oracle(&a, &b), "ref {a:?} hyp {b:?}");
        }
    }

    #[test]
    fn pooled_wer_is_total_over_total() {
        // 1 error over 3 words, plus 0 over 2: pooled 1/5.
        let s1 = wer_stats("a b c", "a x c");
        let s2 = wer_stats("d e", "d e");
        let pooled =
            (s1.edits + s2.edits) as f64 / (s1.ref_words + s2.ref_words) as f64;
        assert!((pooled - 0.2).abs() < 1e-12);
    }

    #[test]
    fn csv_escapes_awkward_fields() {
        let report = EvalReport {
            rows: vec![EvalRow {
                audio: "a,b.wav".into(),
                reference: "say \"hi\"".into(),
                hypothesis: "plain".into(),
                wer: 1.0,
            }],
            skipped: vec![],
            total_edits: 2,
            total_ref_words: 2,
            pooled_wer: 1.0,
        };
        let csv = report_to_csv(&report);
        assert!(csv.contains("\"a,b.wav\""));
        assert!(csv.contains("\"say \"\"hi\"\"\""));
    }
}
