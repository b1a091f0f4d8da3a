use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::text::lower_tokens;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Precision and recall from a match count, with 0/0 taken as 0.
    pub fn from_counts(matched: usize, candidate_total: usize, reference_total: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(matched, candidate_total);
        let recall = ratio(matched, reference_total);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap on lowercased whitespace tokens.
pub fn rouge_n(reference: &str, candidate: &str, n: usize) -> Prf {
    rouge_n_tokens(&lower_tokens(reference), &lower_tokens(candidate), n)
}

pub fn rouge_n_tokens(reference: &[String], candidate: &[String], n: usize) -> Prf {
    let r = ngram_counts(reference, n);
    let c = ngram_counts(candidate, n);
    let matched = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    Prf::from_counts(matched, c.values().sum(), r.values().sum())
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(reference: &str, candidate: &str) -> Prf {
    rouge_l_tokens(&lower_tokens(reference), &lower_tokens(candidate))
}

pub fn rouge_l_tokens(reference: &[String], candidate: &[String]) -> Prf {
    Prf::from_counts(lcs_len(reference, candidate), candidate.len(), reference.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
}

pub fn rouge_all(reference: &str, candidate: &str) -> RougeScores {
    let (r, c) = (lower_tokens(reference), lower_tokens(candidate));
    RougeScores {
        rouge1: rouge_n_tokens(&r, &c, 1),
        rouge2: rouge_n_tokens(&r, &c, 2),
        rouge_l: rouge_l_tokens(&r, &c),
    }
}
