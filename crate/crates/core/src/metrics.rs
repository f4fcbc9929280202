//! Corpus BLEU and token accuracy.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EVAL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub bleu: f64,
    pub token_accuracy: f64,
    pub n_sentences: usize,
}

fn check_pair<T>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<()> {
    if candidates.len() != references.len() {
        return Err(Error::InvalidInput(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    Ok(())
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU in `[0, 100]` with one reference per candidate and no
/// smoothing: any zero n-gram precision gives 0. Orders longer than every
/// candidate have no n-grams and are left out of the geometric mean.
pub fn bleu_corpus<T: Hash + Eq>(candidates: &[Vec<T>], references: &[Vec<T>], max_n: usize) -> Result<f64> {
    check_pair(candidates, references)?;
    if max_n == 0 {
        return Err(Error::InvalidInput("max_n must be at least 1".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, k) in ngram_counts(c, n) {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..max_n {
        if total[n] == 0 {
            continue;
        }
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
        orders += 1;
    }
    let bp = (1.0 - ref_len as f64 / cand_len as f64).min(0.0);
    Ok(100.0 * (bp + log_sum / orders as f64).exp())
}

/// Position-wise exact matches over the overlapping prefix, divided by the
/// total of `max(len_c, len_r)` over all pairs.
pub fn token_accuracy<T: PartialEq>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_pair(candidates, references)?;
    let mut hits = 0usize;
    let mut denom = 0usize;
    for (c, r) in candidates.iter().zip(references) {
        hits += c.iter().zip(r).filter(|(a, b)| a == b).count();
        denom += c.len().max(r.len());
    }
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(hits as f64 / denom as f64)
}

pub fn evaluate<T: Hash + Eq>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<EvalReport> {
    Ok(EvalReport {
        format_version: EVAL_FORMAT_VERSION,
        bleu: bleu_corpus(candidates, references, 4)?,
        token_accuracy: token_accuracy(candidates, references)?,
        n_sentences: candidates.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let refs = vec![words("a b c d e"), words("x y z w v u")];
        assert!((bleu_corpus(&refs, &refs, 4).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(token_accuracy(&refs, &refs).unwrap(), 1.0);
    }

    #[test]
    fn repeated_word_has_zero_bigram_precision() {
        let c = vec![words("the the the the")];
        let r = vec![words("the cat")];
        assert_eq!(bleu_corpus(&c, &r, 4).unwrap(), 0.0);
    }

    #[test]
    fn short_candidate_gets_brevity_penalty() {
        let c = vec![words("the cat")];
        let r = vec![words("the cat sat")];
        let expected = 100.0 * (-0.5f64).exp();
        assert!((bleu_corpus(&c, &r, 4).unwrap() - expected).abs() < 1e-9);
        assert!((bleu_corpus(&c, &r, 2).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn token_accuracy_fixtures() {
        let c = vec![vec![1, 2, 3, 4], vec![5, 6]];
        let r = vec![vec![1, 2, 9, 9], vec![7, 6]];
        assert_eq!(token_accuracy(&c, &r).unwrap(), 0.5);
        let disjoint = vec![vec![10, 11], vec![12]];
        assert_eq!(token_accuracy(&disjoint, &[vec![1, 2], vec![3]]).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_or_empty_rejected() {
        let a = vec![vec![1]];
        assert!(bleu_corpus::<i32>(&[], &[], 4).is_err());
        assert!(bleu_corpus(&a, &[], 4).is_err());
        assert!(token_accuracy::<i32>(&[], &[]).is_err());
    }
}
