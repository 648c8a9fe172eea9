//! BM25 sparse index over case snippets.
//!
//! Scoring uses the plus-one IDF variant, `ln(1 + (N - df + 0.5) / (df +
//! 0.5))`, which keeps every present term's contribution positive, with
//! `k1 = 1.2` and `b = 0.75` for term-frequency saturation and length
//! normalization. Queries score over their unique terms; documents sharing no
//! term with the query are excluded rather than returned at zero.

use super::dense::IndexEntry;
use super::tokenize;
use std::collections::{BTreeMap, HashMap};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

pub struct SparseIndex {
    entries: Vec<IndexEntry>,
    doc_term_freq: Vec<HashMap<String, usize>>,
    doc_len: Vec<usize>,
    doc_freq: BTreeMap<String, usize>,
    avg_len: f64,
}

impl SparseIndex {
    pub fn build(entries: Vec<IndexEntry>) -> Self {
        let kept: Vec<IndexEntry> = entries
            .into_iter()
            .filter(|e| !e.text.trim().is_empty())
            .collect();
        let mut doc_term_freq = Vec::with_capacity(kept.len());
        let mut doc_len = Vec::with_capacity(kept.len());
        let mut doc_freq: BTreeMap<String, usize> = BTreeMap::new();
        for entry in &kept {
            let tokens = tokenize(&entry.text);
            doc_len.push(tokens.len());
            let mut tf: HashMap<String, usize> = HashMap::new();
            for token in tokens {
                *tf.entry(token).or_insert(0) += 1;
            }
            for term in tf.keys() {
                *doc_freq.entry(term.clone()).or_insert(0) += 1;
            }
            doc_term_freq.push(tf);
        }
        let avg_len = if kept.is_empty() {
            0.0
        } else {
            doc_len.iter().sum::<usize>() as f64 / kept.len() as f64
        };
        SparseIndex {
            entries: kept,
            doc_term_freq,
            doc_len,
            doc_freq,
            avg_len,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn score(&self, query: &str, doc: usize) -> f64 {
        let n = self.entries.len() as f64;
        let mut seen = std::collections::HashSet::new();
        let mut total = 0.0;
        for term in tokenize(query) {
            if !seen.insert(term.clone()) {
                continue;
            }
            let tf = *self.doc_term_freq[doc].get(&term).unwrap_or(&0) as f64;
            if tf == 0.0 {
                continue;
            }
            let df = *self.doc_freq.get(&term).unwrap_or(&0) as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            let norm = tf + BM25_K1 * (1.0 - BM25_B + BM25_B * self.doc_len[doc] as f64 / self.avg_len);
            total += idf * tf * (BM25_K1 + 1.0) / norm;
        }
        total
    }

    /// Top-`k` entries sharing at least one term with the query, by
    /// descending score, ties broken by entry order.
    pub fn search(&self, query: &str, k: usize) -> Vec<(usize, f64)> {
        let mut hits: Vec<(usize, f64)> = (0..self.entries.len())
            .map(|i| (i, self.score(query, i)))
            .filter(|&(_, s)| s > 0.0)
            .collect();
        hits.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        hits.truncate(k);
        hits
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::FieldTag;

    fn toy() -> SparseIndex {
        let texts = [
            "severe resting tremor in left hand",
            "tremor improved after levodopa",
            "freezing of gait when turning",
            "visual hallucinations at night",
            "resting tremor and gait freezing",
        ];
        SparseIndex::build(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| IndexEntry {
                    patient_id: format!("d{i}"),
                    field_tag: FieldTag::Subjective,
                    text: (*t).into(),
                    associated_drugs: Default::default(),
                    prior_drugs: Default::default(),
                })
                .collect(),
        )
    }

    // Hand-frozen scores for the toy corpus (avg doc length 4.8).
    #[test]
    fn scores_match_frozen_table() {
        let index = toy();
        let expect = |q: &str, want: [f64; 5]| {
            for (i, w) in want.iter().enumerate() {
                assert!(
                    (index.score(q, i) - w).abs() < 1e-9,
                    "query {q:?} doc {i}: {} vs {w}",
                    index.score(q, i)
                );
            }
        };
        expect(
            "resting tremor",
            [1.2832261954, 0.5784352691, 0.0, 0.0, 1.3907591168],
        );
        expect(
            "gait freezing turning",
            [0.0, 0.0, 3.0846525313, 0.0, 1.7215921539],
        );
        expect("levodopa", [0.0, 1.4877305339, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn search_ranks_and_drops_no_overlap_docs() {
        let index = toy();
        let hits = index.search("resting tremor", 7);
        let order: Vec<usize> = hits.iter().map(|&(i, _)| i).collect();
        assert_eq!(order, [4, 0, 1]);
        let top2 = index.search("resting tremor", 2);
        assert_eq!(top2.len(), 2);
        assert_eq!(top2[0].0, 4);
    }

    #[test]
    fn repeated_query_terms_do_not_double_count() {
        let index = toy();
        assert_eq!(
            index.score("tremor tremor", 0),
            index.score("tremor", 0)
        );
    }
}
