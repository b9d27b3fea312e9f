//! Evaluation suite: ROUGE-N / ROUGE-L / ROUGE-Lsum (F1, lowercased,
//! whitespace-tokenized, no stemming), length-violation metrics, and the
//! punctuation cut-off proxy for unnaturally truncated text.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Characters accepted as a natural ending: terminal punctuation plus
/// closing quotes/parens that may follow it.
const NATURAL_ENDINGS: [char; 7] = ['.', '!', '?', '"', '\'', ')', '\u{2026}'];

/// Aggregated scores for one prediction set. ROUGE values and percentages
/// are on a 0..=100 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub rouge_lsum: f64,
    pub pct_too_long: f64,
    pub avg_extra_chars: f64,
    pub pct_cutoff: f64,
    pub mean_pred_chars: f64,
    pub n_samples: usize,
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-N F1 over n-gram multiset overlap. 0 when either side has no
/// n-grams.
pub fn rouge_n(pred: &str, reference: &str, n: usize) -> f64 {
    assert!(n >= 1, "rouge_n needs n >= 1");
    let pt = tokenize(pred);
    let rt = tokenize(reference);
    if pt.len() < n || rt.len() < n {
        return 0.0;
    }
    let pc = ngram_counts(&pt, n);
    let rc = ngram_counts(&rt, n);
    let overlap: usize = pc
        .iter()
        .map(|(gram, &c)| c.min(*rc.get(gram).unwrap_or(&0)))
        .sum();
    let p = overlap as f64 / (pt.len() - n + 1) as f64;
    let r = overlap as f64 / (rt.len() - n + 1) as f64;
    f1(p, r)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence over whole-text tokens.
pub fn rouge_l(pred: &str, reference: &str) -> f64 {
    let pt = tokenize(pred);
    let rt = tokenize(reference);
    if pt.is_empty() || rt.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&pt, &rt) as f64;
    f1(lcs / pt.len() as f64, lcs / rt.len() as f64)
}

/// Splits on newlines and on `.`/`!`/`?` followed by whitespace.
fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let boundary = c == '\n'
            || (matches!(c, '.' | '!' | '?')
                && bytes
                    .get(i + 1)
                    .is_none_or(|&b| (b as char).is_whitespace()));
        if boundary {
            let end = if c == '\n' { i } else { i + 1 };
            let s = text[start..end].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = i + 1;
        }
        i += 1;
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Token positions of `a` matched by some LCS alignment with `b`.
fn lcs_positions(a: &[String], b: &[String]) -> Vec<usize> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let (m, n) = (a.len(), b.len());
    let mut dp = vec![0usize; (m + 1) * (n + 1)];
    for i in 0..m {
        for j in 0..n {
            dp[(i + 1) * (n + 1) + j + 1] = if a[i] == b[j] {
                dp[i * (n + 1) + j] + 1
            } else {
                dp[(i + 1) * (n + 1) + j].max(dp[i * (n + 1) + j + 1])
            };
        }
    }
    let mut pos = Vec::new();
    let (mut i, mut j) = (m, n);
    while i > 0 && j > 0 {
        if a[i - 1] == b[j - 1] {
            pos.push(i - 1);
            i -= 1;
            j -= 1;
        } else if dp[(i - 1) * (n + 1) + j] >= dp[i * (n + 1) + j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    pos.reverse();
    pos
}

/// ROUGE-Lsum: per reference sentence, the union of LCS matches against all
/// prediction sentences; hits are aggregated over sentences.
pub fn rouge_lsum(pred: &str, reference: &str) -> f64 {
    let pred_sents: Vec<Vec<String>> = split_sentences(pred).iter().map(|s| tokenize(s)).collect();
    let ref_sents: Vec<Vec<String>> =
        split_sentences(reference).iter().map(|s| tokenize(s)).collect();
    let pred_tokens: usize = pred_sents.iter().map(Vec::len).sum();
    let ref_tokens: usize = ref_sents.iter().map(Vec::len).sum();
    if pred_tokens == 0 || ref_tokens == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    for rs in &ref_sents {
        let mut matched: HashSet<usize> = HashSet::new();
        for ps in &pred_sents {
            matched.extend(lcs_positions(rs, ps));
        }
        hits += matched.len();
    }
    f1(
        hits as f64 / pred_tokens as f64,
        hits as f64 / ref_tokens as f64,
    )
}

/// The paper's primary metric pair: percentage of predictions exceeding
/// their character limit, and mean overshoot in characters over all samples
/// (zeros included).
pub fn length_metrics(preds: &[String], limits: &[usize]) -> Result<(f64, f64)> {
    if preds.len() != limits.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: limits.len(),
        });
    }
    if preds.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut too_long = 0usize;
    let mut extra = 0usize;
    for (p, &limit) in preds.iter().zip(limits) {
        let len = p.chars().count();
        if len > limit {
            too_long += 1;
            extra += len - limit;
        }
    }
    let n = preds.len() as f64;
    Ok((100.0 * too_long as f64 / n, extra as f64 / n))
}

fn is_cut_off(pred: &str) -> bool {
    match pred.trim_end().chars().last() {
        Some(c) => !NATURAL_ENDINGS.contains(&c),
        None => true, // empty counts as cut off
    }
}

/// Percentage of predictions not ending in a punctuation mark — a proxy for
/// unnaturally truncated text.
pub fn pct_cutoff(preds: &[String]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let cut = preds.iter().filter(|p| is_cut_off(p)).count();
    100.0 * cut as f64 / preds.len() as f64
}

impl MetricsReport {
    /// Pure aggregation over aligned (prediction, reference, limit) triples.
    pub fn compute(preds: &[String], refs: &[String], limits: &[usize]) -> Result<Self> {
        if preds.len() != refs.len() {
            return Err(Error::LengthMismatch {
                left: preds.len(),
                right: refs.len(),
            });
        }
        let (pct_too_long, avg_extra_chars) = length_metrics(preds, limits)?;
        let n = preds.len();
        let mean = |f: &dyn Fn(&str, &str) -> f64| -> f64 {
            if n == 0 {
                return 0.0;
            }
            preds
                .iter()
                .zip(refs)
                .map(|(p, r)| f(p, r))
                .sum::<f64>()
                / n as f64
        };
        let mean_pred_chars = if n == 0 {
            0.0
        } else {
            preds.iter().map(|p| p.chars().count()).sum::<usize>() as f64 / n as f64
        };
        Ok(MetricsReport {
            rouge1: 100.0 * mean(&|p, r| rouge_n(p, r, 1)),
            rouge2: 100.0 * mean(&|p, r| rouge_n(p, r, 2)),
            rouge_l: 100.0 * mean(&rouge_l),
            rouge_lsum: 100.0 * mean(&rouge_lsum),
            pct_too_long,
            avg_extra_chars,
            pct_cutoff: pct_cutoff(preds),
            mean_pred_chars,
            n_samples: n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rouge2_identity() {
        assert_eq!(rouge_n("the cat sat", "the cat sat", 2), 1.0);
    }

    #[test]
    fn rouge2_no_shared_bigram() {
        assert_eq!(rouge_n("the cat", "the dog", 2), 0.0);
    }

    #[test]
    fn rouge2_handcomputed_fixture() {
        // overlap {a b, c d}; P = 2/3, R = 2/4, F1 = 4/7
        let score = rouge_n("a b c d", "a b x c d", 2);
        assert!((score - 4.0 / 7.0).abs() < 1e-12, "{score}");
    }

    #[test]
    fn rouge_bounds_and_self_identity() {
        for s in ["hello world", "a", "many words in a row"] {
            assert_eq!(rouge_n(s, s, 1), 1.0);
            assert_eq!(rouge_l(s, s), 1.0);
            assert_eq!(rouge_lsum(s, s), 1.0);
        }
        assert_eq!(rouge_n("", "x", 1), 0.0);
        assert_eq!(rouge_l("abc def", "ghi jkl"), 0.0);
        assert_eq!(rouge_lsum("abc def.", "ghi jkl."), 0.0);
    }

    #[test]
    fn rouge_l_lcs_fixture() {
        // LCS("a c e", "a b c d e") = 3; P = 1, R = 3/5, F1 = 0.75
        let score = rouge_l("a c e", "a b c d e");
        assert!((score - 0.75).abs() < 1e-12, "{score}");
    }

    #[test]
    fn rouge_is_case_insensitive() {
        assert_eq!(rouge_n("The Cat", "the cat", 2), 1.0);
    }

    #[test]
    fn sentence_split_rules() {
        assert_eq!(
            split_sentences("One two. Three four! Five?"),
            vec!["One two.", "Three four!", "Five?"]
        );
        assert_eq!(split_sentences("line one\nline two"), vec!["line one", "line two"]);
        // a period not followed by whitespace does not split
        assert_eq!(split_sentences("ver 1.2 is out"), vec!["ver 1.2 is out"]);
    }

    #[test]
    fn length_metrics_examples() {
        let preds: Vec<String> = [240, 260, 250]
            .iter()
            .map(|&n| "x".repeat(n))
            .collect();
        let (pct, _) = length_metrics(&preds, &[250, 250, 250]).unwrap();
        assert!((pct - 33.333333333333336).abs() < 1e-9);

        let within: Vec<String> = vec!["ok".into(), "also ok".into()];
        assert_eq!(length_metrics(&within, &[100, 100]).unwrap(), (0.0, 0.0));

        let preds: Vec<String> = [260, 240].iter().map(|&n| "x".repeat(n)).collect();
        let (_, avg_extra) = length_metrics(&preds, &[250, 250]).unwrap();
        assert_eq!(avg_extra, 5.0);

        assert!(matches!(
            length_metrics(&within, &[100]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn cutoff_examples() {
        let ok: Vec<String> = vec!["A sentence.".into(), "Another!".into()];
        assert_eq!(pct_cutoff(&ok), 0.0);
        let cut: Vec<String> = vec!["Truncated mid-wo".into()];
        assert_eq!(pct_cutoff(&cut), 100.0);
    }

    #[test]
    fn cutoff_hand_labeled_fixture() {
        let preds: Vec<String> = vec![
            "Ends with period.".into(),        // natural
            "Ends with bang!".into(),          // natural
            "Ends with question?".into(),      // natural
            "He said \"stop.\"".into(),        // natural: closing quote
            "Parenthetical (aside.)".into(),   // natural: closing paren
            "Trailing ellipsis\u{2026}".into(), // natural
            "cut mid wor".into(),              // cut
            "ends with comma,".into(),         // cut
            "".into(),                         // cut (empty)
            "trailing spaces.   ".into(),      // natural after trim
        ];
        let expect = 100.0 * 3.0 / 10.0;
        assert_eq!(pct_cutoff(&preds), expect);
    }

    #[test]
    fn report_is_order_insensitive() {
        let preds: Vec<String> = vec![
            "alpha beta gamma.".into(),
            "delta epsilon".into(),
            "zeta eta theta iota!".into(),
        ];
        let refs: Vec<String> = vec![
            "alpha beta gamma delta.".into(),
            "epsilon delta".into(),
            "zeta eta theta.".into(),
        ];
        let limits = vec![10, 20, 15];
        let a = MetricsReport::compute(&preds, &refs, &limits).unwrap();

        let perm = [2usize, 0, 1];
        let pp: Vec<String> = perm.iter().map(|&i| preds[i].clone()).collect();
        let rp: Vec<String> = perm.iter().map(|&i| refs[i].clone()).collect();
        let lp: Vec<usize> = perm.iter().map(|&i| limits[i]).collect();
        let b = MetricsReport::compute(&pp, &rp, &lp).unwrap();
        // permutation changes only float summation order
        let close = |x: f64, y: f64| (x - y).abs() < 1e-9;
        assert!(close(a.rouge1, b.rouge1));
        assert!(close(a.rouge2, b.rouge2));
        assert!(close(a.rouge_l, b.rouge_l));
        assert!(close(a.rouge_lsum, b.rouge_lsum));
        assert!(close(a.pct_too_long, b.pct_too_long));
        assert!(close(a.avg_extra_chars, b.avg_extra_chars));
        assert!(close(a.pct_cutoff, b.pct_cutoff));
        assert_eq!(a.n_samples, b.n_samples);
    }

    #[test]
    fn truncation_never_decreases_corpus_cutoff() {
        let preds: Vec<String> = vec![
            "a full sentence.".into(),
            "another complete one!".into(),
            "already cut of".into(),
        ];
        let base = pct_cutoff(&preds);
        for limit in [5, 10, 14] {
            let truncated: Vec<String> = preds
                .iter()
                .map(|p| crate::decode::truncate_baseline(p, limit))
                .collect();
            assert!(pct_cutoff(&truncated) >= base);
        }
    }
}
