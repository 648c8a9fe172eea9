//! Similar-case retrieval: embedding backends, an exact dense index with
//! field-tag routing, a BM25 sparse index, whole-note bigram similarity with
//! an adaptive score filter, and guideline-document chunking.
//!
//! All ranking is deterministic: scores sort descending and ties break on
//! stable entry order, so identical inputs always produce identical result
//! lists.

mod chunk;
mod dense;
mod embed;
mod sparse;
mod treatrag;

pub use chunk::{chunk_text, Chunk};
pub use dense::{DenseIndex, FieldTag, IndexEntry, RetrievedCase};
pub use embed::{cosine, Embedder, HashEmbedder, HttpEmbedder};
pub use sparse::SparseIndex;
pub use treatrag::{adaptive_threshold, bigram_set, jaccard, rank_by_bigram_jaccard, select_survivors, ScoredCandidate};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index file corrupt: {0}")]
    IndexCorrupt(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("index metadata: {0}")]
    Json(#[from] serde_json::Error),
}

/// Dense retrieval knobs: cases returned per query and the minimum cosine
/// similarity a case must reach to count as evidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalParams {
    pub k: usize,
    pub tau: f64,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        RetrievalParams { k: 7, tau: 0.9 }
    }
}

/// Shared tokenizer for sparse scoring and bigram similarity: case-fold and
/// split on whitespace, keeping punctuation attached to its token.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}
