//! Text generation metrics: BLEU-1, ROUGE-L (F1), embedding-based
//! Average/Extrema/Greedy, and corpus-pooled Distinct-1/2.
//!
//! Metric tokenization is lowercase whitespace splitting with punctuation
//! separated into its own tokens. Corpus aggregation: BLEU-1 sums clipped
//! counts and lengths before the ratio (with the standard brevity penalty);
//! ROUGE-L and the embedding metrics are per-example means; Distinct-n pools
//! n-grams over all responses.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use crate::contrastive::cosine_similarity;
use crate::nn::EmbeddingTable;
use crate::scalar::Scalar;
use crate::tokenizer::Tokenizer;

/// Lowercases and splits on whitespace, breaking punctuation out of words.
pub fn metric_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        let c = ch.to_ascii_lowercase();
        if c.is_whitespace() {
            if !current.is_empty() {
                out.push(core::mem::take(&mut current));
            }
        } else if c.is_alphanumeric() || c == '\'' {
            current.push(c);
        } else {
            if !current.is_empty() {
                out.push(core::mem::take(&mut current));
            }
            out.push(String::from(c));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

fn counts<'a>(tokens: &'a [String]) -> BTreeMap<&'a str, usize> {
    let mut map = BTreeMap::new();
    for t in tokens {
        *map.entry(t.as_str()).or_insert(0) += 1;
    }
    map
}

/// Clipped unigram matches of one candidate against one reference.
fn clipped_matches(candidate: &[String], reference: &[String]) -> usize {
    let ref_counts = counts(reference);
    let mut matched = 0;
    let mut used: BTreeMap<&str, usize> = BTreeMap::new();
    for t in candidate {
        let cap = ref_counts.get(t.as_str()).copied().unwrap_or(0);
        let u = used.entry(t.as_str()).or_insert(0);
        if *u < cap {
            *u += 1;
            matched += 1;
        }
    }
    matched
}

/// Sentence-level BLEU-1: clipped unigram precision times the brevity
/// penalty. Empty candidates score 0 (flagged).
pub fn bleu1(candidate: &[String], reference: &[String]) -> (f64, bool) {
    if candidate.is_empty() {
        return (0.0, true);
    }
    let matched = clipped_matches(candidate, reference);
    let precision = matched as f64 / candidate.len() as f64;
    let bp = brevity_penalty(candidate.len(), reference.len());
    (precision * bp, false)
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c >= r {
        1.0
    } else if c == 0 {
        0.0
    } else {
        libm::exp(1.0 - r as f64 / c as f64)
    }
}

/// Corpus-level BLEU-1: clipped counts and lengths are summed over the
/// corpus before the ratio and the brevity penalty.
pub fn bleu1_corpus(pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
    let mut matched = 0usize;
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, reference) in pairs {
        matched += clipped_matches(cand, reference);
        cand_len += cand.len();
        ref_len += reference.len();
    }
    if cand_len == 0 {
        return 0.0;
    }
    (matched as f64 / cand_len as f64) * brevity_penalty(cand_len, ref_len)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = alloc::vec![0usize; b.len() + 1];
    let mut cur = alloc::vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L as an F1 over the longest common subsequence (beta = 1).
/// Empty inputs score 0 (flagged).
pub fn rouge_l(candidate: &[String], reference: &[String]) -> (f64, bool) {
    if candidate.is_empty() || reference.is_empty() {
        return (0.0, true);
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return (0.0, false);
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    (2.0 * p * r / (p + r), false)
}

/// Per-dimension extrema: the max unless the min dominates in magnitude.
pub fn extrema_vector(rows: &[Vec<f64>]) -> Vec<f64> {
    if rows.is_empty() {
        return Vec::new();
    }
    let d = rows[0].len();
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        let mut mx = f64::NEG_INFINITY;
        let mut mn = f64::INFINITY;
        for r in rows {
            mx = mx.max(r[j]);
            mn = mn.min(r[j]);
        }
        out.push(if mx.abs() >= mn.abs() { mx } else { mn });
    }
    out
}

fn mean_vector(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut out = alloc::vec![0.0; d];
    for r in rows {
        for j in 0..d {
            out[j] += r[j];
        }
    }
    for v in &mut out {
        *v /= rows.len() as f64;
    }
    out
}

fn greedy_direction(from: &[Vec<f64>], to: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for f in from {
        let mut best = f64::NEG_INFINITY;
        for t in to {
            best = best.max(cosine_similarity(f, t).0);
        }
        total += best;
    }
    total / from.len() as f64
}

/// Embedding rows for metric tokens; unknown words map to the `<unk>` row.
fn embed_rows<T: Scalar>(tokens: &[String], tok: &Tokenizer, table: &EmbeddingTable<T>) -> Vec<Vec<f64>> {
    tokens
        .iter()
        .map(|t| {
            let id = tok.id_of(t) as usize;
            table.table.row(id).iter().map(|v| v.to_f64()).collect()
        })
        .collect()
}

/// (average, extrema, greedy) for one candidate/reference pair; the flag
/// marks sentences where every token was unknown.
pub fn embedding_metrics<T: Scalar>(
    candidate: &[String],
    reference: &[String],
    tok: &Tokenizer,
    table: &EmbeddingTable<T>,
) -> (f64, f64, f64, bool) {
    if candidate.is_empty() || reference.is_empty() {
        return (0.0, 0.0, 0.0, true);
    }
    let all_unk = candidate.iter().all(|t| tok.id_of(t) == crate::tokenizer::UNK)
        && reference.iter().all(|t| tok.id_of(t) == crate::tokenizer::UNK);
    let c_rows = embed_rows(candidate, tok, table);
    let r_rows = embed_rows(reference, tok, table);
    let average = cosine_similarity(&mean_vector(&c_rows), &mean_vector(&r_rows)).0;
    let extrema = cosine_similarity(&extrema_vector(&c_rows), &extrema_vector(&r_rows)).0;
    let greedy = 0.5 * (greedy_direction(&c_rows, &r_rows) + greedy_direction(&r_rows, &c_rows));
    (average, extrema, greedy, all_unk)
}

/// Corpus-pooled Distinct-n: unique n-grams over all responses divided by
/// the total n-gram count. All-too-short corpora report 0 (flagged).
pub fn distinct_n(responses: &[Vec<String>], n: usize) -> (f64, bool) {
    let mut unique: BTreeSet<Vec<&str>> = BTreeSet::new();
    let mut total = 0usize;
    for r in responses {
        if r.len() < n {
            continue;
        }
        for w in r.windows(n) {
            unique.insert(w.iter().map(String::as_str).collect());
            total += 1;
        }
    }
    if total == 0 {
        return (0.0, true);
    }
    (unique.len() as f64 / total as f64, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn toks(s: &str) -> Vec<String> {
        metric_tokens(s)
    }

    #[test]
    fn tokenization_lowercases_and_splits_punctuation() {
        assert_eq!(toks("A red Square."), ["a", "red", "square", "."]);
        assert_eq!(toks("it's  fine!"), ["it's", "fine", "!"]);
    }

    #[test]
    fn bleu1_hand_cases() {
        let (b, _) = bleu1(&toks("the cat"), &toks("the cat"));
        assert!((b - 1.0).abs() < 1e-12);
        let (b2, _) = bleu1(&toks("the cat sat"), &toks("the cat"));
        assert!((b2 - 2.0 / 3.0).abs() < 1e-6);
        let (b3, _) = bleu1(&toks("dog bird"), &toks("the cat"));
        assert_eq!(b3, 0.0);
        let (b4, flagged) = bleu1(&[], &toks("the cat"));
        assert_eq!(b4, 0.0);
        assert!(flagged);
    }

    #[test]
    fn bleu1_corpus_matches_hand_case() {
        let pairs = alloc::vec![(toks("the cat sat"), toks("the cat"))];
        assert!((bleu1_corpus(&pairs) - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn bleu1_brevity_penalty_applies() {
        // candidate shorter than reference: BP = exp(1 - r/c).
        let (b, _) = bleu1(&toks("the"), &toks("the cat"));
        assert!((b - libm::exp(1.0 - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn bleu1_is_one_iff_unigram_multiset_matches_at_equal_length() {
        let (b, _) = bleu1(&toks("cat the"), &toks("the cat"));
        assert!((b - 1.0).abs() < 1e-12);
        let (b2, _) = bleu1(&toks("the the"), &toks("the cat"));
        assert!(b2 < 1.0);
    }

    #[test]
    fn rouge_hand_cases() {
        let (r, _) = rouge_l(&toks("the cat sat"), &toks("the cat sat"));
        assert!((r - 1.0).abs() < 1e-12);
        let (r2, _) = rouge_l(&toks("the cat sat"), &toks("the cat"));
        assert!((r2 - 0.8).abs() < 1e-6);
        let (r3, flagged) = rouge_l(&[], &toks("x"));
        assert_eq!(r3, 0.0);
        assert!(flagged);
    }

    #[test]
    fn rouge_reversed_distinct_tokens() {
        // Reversal of n distinct tokens leaves LCS 1 -> F1 = 1/n.
        let cand = toks("a b c d");
        let mut rev = cand.clone();
        rev.reverse();
        let (r, _) = rouge_l(&rev, &cand);
        assert!((r - 0.25).abs() < 1e-12);
    }

    #[test]
    fn extrema_rule() {
        let rows = alloc::vec![alloc::vec![1.0, -3.0], alloc::vec![2.0, 1.0]];
        assert_eq!(extrema_vector(&rows), alloc::vec![2.0, -3.0]);
    }

    #[test]
    fn embedding_metrics_identity_and_symmetry() {
        let tok = Tokenizer::from_texts(["red square blue circle large small"]);
        let table = EmbeddingTable::<f64>::new(tok.vocab_size(), 6, &mut Rng::new(0));
        let cand = toks("red square");
        let reference = toks("red square");
        let (a, e, g, flag) = embedding_metrics(&cand, &reference, &tok, &table);
        assert!((a - 1.0).abs() < 1e-7);
        assert!((e - 1.0).abs() < 1e-7);
        assert!((g - 1.0).abs() < 1e-7);
        assert!(!flag);

        let other = toks("blue circle large");
        let (_, _, g1, _) = embedding_metrics(&cand, &other, &tok, &table);
        let (_, _, g2, _) = embedding_metrics(&other, &cand, &tok, &table);
        assert!((g1 - g2).abs() < 1e-12);
    }

    #[test]
    fn all_unknown_sentences_flagged() {
        let tok = Tokenizer::from_texts(["red"]);
        let table = EmbeddingTable::<f64>::new(tok.vocab_size(), 4, &mut Rng::new(0));
        let (_, _, _, flag) = embedding_metrics(&toks("zzz qqq"), &toks("www"), &tok, &table);
        assert!(flag);
    }

    #[test]
    fn distinct_hand_cases() {
        let (d1, _) = distinct_n(&[toks("a a b")], 1);
        assert!((d1 - 2.0 / 3.0).abs() < 1e-6);
        let (all_unique, _) = distinct_n(&[toks("a b c")], 1);
        assert!((all_unique - 1.0).abs() < 1e-12);
        let (degenerate, _) = distinct_n(&[toks("a a"), toks("a a")], 1);
        assert!((degenerate - 0.25).abs() < 1e-12);
        let (zero, flagged) = distinct_n(&[toks("a")], 2);
        assert_eq!(zero, 0.0);
        assert!(flagged);
    }

    #[test]
    fn distinct_pools_across_responses() {
        let (d, _) = distinct_n(&[toks("a b"), toks("b c")], 2);
        // Bigrams: (a b), (b c) -> 2 unique / 2 total.
        assert!((d - 1.0).abs() < 1e-12);
    }
}
