//! Whole-note case similarity: token-bigram Jaccard with an adaptive filter.
//!
//! Candidates are scored by Jaccard overlap of their token-bigram sets with
//! the query note. Rather than a fixed cutoff, the filter adapts to the score
//! distribution: among candidates with positive similarity, it keeps those at
//! or above `mean + 1.5 * population_std`. When every positive score is equal
//! the deviation is zero and all of them survive.

use std::collections::HashSet;

pub type BigramSet = HashSet<(String, String)>;

pub fn bigram_set(text: &str) -> BigramSet {
    let tokens = super::tokenize(text);
    tokens
        .windows(2)
        .map(|w| (w[0].clone(), w[1].clone()))
        .collect()
}

/// Jaccard overlap of two bigram sets. Two empty sets are identical, hence 1.
pub fn jaccard(a: &BigramSet, b: &BigramSet) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    inter / union
}

/// Filter cutoff over the positive scores: `mean + 1.5 * population_std`.
/// `None` when no score is positive.
pub fn adaptive_threshold(scores: &[f64]) -> Option<f64> {
    let positives: Vec<f64> = scores.iter().copied().filter(|&s| s > 0.0).collect();
    if positives.is_empty() {
        return None;
    }
    let n = positives.len() as f64;
    let mean = positives.iter().sum::<f64>() / n;
    let var = positives.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Some(mean + 1.5 * var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub index: usize,
    pub score: f64,
}

/// Score every candidate note against the query and rank positives by
/// descending similarity (ties keep candidate order). This is the ranking the
/// precision-at-k curves read from.
pub fn rank_by_bigram_jaccard(query: &str, candidates: &[String]) -> Vec<ScoredCandidate> {
    let q = bigram_set(query);
    let mut scored: Vec<ScoredCandidate> = candidates
        .iter()
        .enumerate()
        .map(|(index, text)| ScoredCandidate {
            index,
            score: jaccard(&q, &bigram_set(text)),
        })
        .filter(|c| c.score > 0.0)
        .collect();
    scored.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    scored
}

/// Apply the adaptive filter to a ranked list: survivors are the candidates
/// at or above the threshold, already in descending-score order.
pub fn select_survivors(ranked: &[ScoredCandidate]) -> Vec<ScoredCandidate> {
    let scores: Vec<f64> = ranked.iter().map(|c| c.score).collect();
    match adaptive_threshold(&scores) {
        None => Vec::new(),
        Some(thr) => ranked.iter().filter(|c| c.score >= thr).cloned().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bigram_jaccard_matches_hand_count() {
        // {parkinson-disease, disease-tremor} vs {parkinson-disease} -> 1/2.
        let a = bigram_set("parkinson disease tremor");
        let b = bigram_set("parkinson disease");
        assert!((jaccard(&a, &b) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn jaccard_is_symmetric_and_identical_is_one() {
        let a = bigram_set("freezing of gait episodes");
        let b = bigram_set("gait freezing of episodes");
        assert_eq!(jaccard(&a, &b), jaccard(&b, &a));
        assert!((jaccard(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_matches_frozen_example() {
        // mean 0.35, population std ~0.2598, threshold ~0.7397: only 0.8 survives.
        let scores = [0.2, 0.2, 0.2, 0.8];
        let thr = adaptive_threshold(&scores).unwrap();
        assert!((thr - 0.7397114317029974).abs() < 1e-12);
        let survivors: Vec<f64> = scores.iter().copied().filter(|&s| s >= thr).collect();
        assert_eq!(survivors, [0.8]);
    }

    #[test]
    fn all_equal_positive_scores_all_survive() {
        let ranked: Vec<ScoredCandidate> = (0..4)
            .map(|index| ScoredCandidate { index, score: 0.4 })
            .collect();
        let survivors = select_survivors(&ranked);
        assert_eq!(survivors.len(), 4);
    }

    #[test]
    fn zero_scores_never_survive() {
        assert!(adaptive_threshold(&[0.0, 0.0]).is_none());
        let ranked = rank_by_bigram_jaccard(
            "parkinson disease",
            &["unrelated words entirely".into(), "parkinson disease".into()],
        );
        assert_eq!(ranked.len(), 1);
        assert_eq!(ranked[0].index, 1);
    }
}
