//! Exact dense index with field-tag routing and bit-exact persistence.
//!
//! Search scans every entry under the requested tag, keeps scores at or above
//! the threshold, and returns the top k by descending cosine with ties broken
//! by entry order. No approximation: the result is the brute-force answer by
//! construction, and the tests hold it to that.
//!
//! On disk an index is three files in one directory: `manifest.json`
//! (dimension, entry count, format version), `vectors.bin` (packed
//! little-endian f32, row-major), and `entries.jsonl` (one entry's metadata
//! per line). Reload is bit-exact because vectors round-trip as raw bytes.

use super::{cosine, Embedder, RetrievalError};
use crate::cohort::DrugSet;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

const FORMAT_VERSION: u32 = 1;

/// Which text the entry's vector was computed from. Focus queries route to
/// the matching case field; guideline chunks live in their own lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldTag {
    Subjective,
    Assessment,
    DiagnosisList,
    GuidelineChunk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub patient_id: String,
    pub field_tag: FieldTag,
    /// The snippet the vector was computed from.
    pub text: String,
    /// Prescription associated with the source encounter (empty for
    /// guideline chunks).
    pub associated_drugs: DrugSet,
    /// What the source patient was already taking coming into that
    /// encounter; lets a consumer see which drugs were newly added there.
    #[serde(default, skip_serializing_if = "DrugSet::is_empty")]
    pub prior_drugs: DrugSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedCase {
    pub entry_index: usize,
    pub score: f64,
    pub entry: IndexEntry,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexManifest {
    format_version: u32,
    dim: usize,
    entries: usize,
}

pub struct DenseIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
    vectors: Vec<f32>, // row-major, entries.len() * dim
}

impl DenseIndex {
    /// Embed and index the given entries. Entries with whitespace-only text
    /// are skipped — there is nothing to match them on.
    pub fn build(
        entries: Vec<IndexEntry>,
        embedder: &dyn Embedder,
    ) -> Result<Self, RetrievalError> {
        let kept: Vec<IndexEntry> = entries
            .into_iter()
            .filter(|e| !e.text.trim().is_empty())
            .collect();
        let texts: Vec<String> = kept.iter().map(|e| e.text.clone()).collect();
        let dim = embedder.dim();
        let mut vectors = Vec::with_capacity(kept.len() * dim);
        // Embed in batches so an HTTP embedder gets reasonably sized requests.
        for batch in texts.chunks(64) {
            for v in embedder.embed(batch)? {
                if v.len() != dim {
                    return Err(RetrievalError::DimensionMismatch {
                        expected: dim,
                        got: v.len(),
                    });
                }
                vectors.extend_from_slice(&v);
            }
        }
        Ok(DenseIndex {
            dim,
            entries: kept,
            vectors,
        })
    }

    pub fn from_parts(dim: usize, entries: Vec<IndexEntry>, vectors: Vec<f32>) -> Self {
        assert_eq!(entries.len() * dim, vectors.len());
        DenseIndex {
            dim,
            entries,
            vectors,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
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

    pub fn vector(&self, idx: usize) -> &[f32] {
        &self.vectors[idx * self.dim..(idx + 1) * self.dim]
    }

    /// Top-`k` entries by cosine similarity at or above `tau`, restricted to
    /// `tag` when given. Ties break on entry order.
    pub fn search(
        &self,
        query: &[f32],
        k: usize,
        tau: f64,
        tag: Option<FieldTag>,
    ) -> Vec<RetrievedCase> {
        if query.len() != self.dim || k == 0 {
            return Vec::new();
        }
        let mut hits: Vec<(usize, f64)> = Vec::new();
        for (idx, entry) in self.entries.iter().enumerate() {
            if let Some(t) = tag {
                if entry.field_tag != t {
                    continue;
                }
            }
            let score = cosine(query, self.vector(idx));
            if score >= tau {
                hits.push((idx, score));
            }
        }
        hits.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        hits.truncate(k);
        hits.into_iter()
            .map(|(idx, score)| RetrievedCase {
                entry_index: idx,
                score,
                entry: self.entries[idx].clone(),
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), RetrievalError> {
        fs::create_dir_all(dir)?;
        let manifest = IndexManifest {
            format_version: FORMAT_VERSION,
            dim: self.dim,
            entries: self.entries.len(),
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        let mut bin = Vec::with_capacity(self.vectors.len() * 4);
        for &x in &self.vectors {
            bin.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(dir.join("vectors.bin"), bin)?;
        let mut meta = fs::File::create(dir.join("entries.jsonl"))?;
        for entry in &self.entries {
            writeln!(meta, "{}", serde_json::to_string(entry)?)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, RetrievalError> {
        let manifest: IndexManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(RetrievalError::IndexCorrupt(format!(
                "format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let bin = fs::read(dir.join("vectors.bin"))?;
        let expected_bytes = manifest.entries * manifest.dim * 4;
        if bin.len() != expected_bytes {
            return Err(RetrievalError::IndexCorrupt(format!(
                "vectors.bin is {} bytes, manifest implies {expected_bytes}",
                bin.len()
            )));
        }
        let vectors: Vec<f32> = bin
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let file = fs::File::open(dir.join("entries.jsonl"))?;
        let mut entries = Vec::with_capacity(manifest.entries);
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        if entries.len() != manifest.entries {
            return Err(RetrievalError::IndexCorrupt(format!(
                "{} entries on disk, manifest says {}",
                entries.len(),
                manifest.entries
            )));
        }
        Ok(DenseIndex {
            dim: manifest.dim,
            entries,
            vectors,
        })
    }
}
