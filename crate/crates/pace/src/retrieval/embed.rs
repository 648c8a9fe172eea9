//! Embedding backends and vector similarity.
//!
//! Two embedders exist behind one trait: an HTTP client for a real embedding
//! service, and a deterministic hash embedder for tests and offline runs. The
//! hash embedder maps each token to a fixed pseudo-random unit-scale vector
//! (seeded by the token's digest), sums, and L2-normalizes — identical texts
//! always embed identically, token-disjoint texts land nearly orthogonal.

use super::RetrievalError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, RetrievalError>;
}

/// Cosine similarity with f64 accumulation. Zero-norm inputs score 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0f64;
    let mut na = 0f64;
    let mut nb = 0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn l2_normalize(v: &mut [f32]) {
    let norm: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = ((*x as f64) / norm) as f32;
        }
    }
}

/// Deterministic token-bag embedder.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 2, "dimension too small to be useful");
        HashEmbedder { dim }
    }

    fn token_vector(&self, token: &str) -> Vec<f32> {
        let digest = Sha256::digest(token.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha20Rng::from_seed(seed);
        // Box-Muller from uniform pairs: isotropic components, so unrelated
        // tokens are near-orthogonal in expectation.
        let mut v = Vec::with_capacity(self.dim);
        while v.len() < self.dim {
            let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            let u2: f64 = rng.random();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            v.push((r * theta.cos()) as f32);
            if v.len() < self.dim {
                v.push((r * theta.sin()) as f32);
            }
        }
        v
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(64)
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, RetrievalError> {
        let mut out = Vec::with_capacity(texts.len());
        for text in texts {
            let tokens = super::tokenize(text);
            let mut acc = vec![0f32; self.dim];
            if tokens.is_empty() {
                // Degenerate but total: hash the raw text as one token.
                acc = self.token_vector(text.trim());
            } else {
                for token in &tokens {
                    let tv = self.token_vector(token);
                    for (a, t) in acc.iter_mut().zip(tv) {
                        *a += t;
                    }
                }
            }
            l2_normalize(&mut acc);
            out.push(acc);
        }
        Ok(out)
    }
}

/// Client for an embedding service speaking
/// `POST <base>/embed {"texts": [..]} -> {"vectors": [[..]]}` with a
/// `GET <base>/capabilities -> {"dim": n}` handshake.
pub struct HttpEmbedder {
    client: reqwest::blocking::Client,
    base_url: String,
    dim: usize,
}

#[derive(Deserialize)]
struct Capabilities {
    dim: usize,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

impl HttpEmbedder {
    pub fn connect(base_url: &str) -> Result<Self, RetrievalError> {
        let client = reqwest::blocking::Client::new();
        let url = format!("{}/capabilities", base_url.trim_end_matches('/'));
        let caps: Capabilities = client
            .get(&url)
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| RetrievalError::EmbedderUnavailable(e.to_string()))?;
        Ok(HttpEmbedder {
            client,
            base_url: base_url.trim_end_matches('/').to_string(),
            dim: caps.dim,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, RetrievalError> {
        let url = format!("{}/embed", self.base_url);
        let body = serde_json::json!({ "texts": texts });
        let resp: EmbedResponse = self
            .client
            .post(&url)
            .json(&body)
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| RetrievalError::EmbedderUnavailable(e.to_string()))?;
        if resp.vectors.len() != texts.len() {
            return Err(RetrievalError::EmbedderUnavailable(format!(
                "service returned {} vectors for {} texts",
                resp.vectors.len(),
                texts.len()
            )));
        }
        for v in &resp.vectors {
            if v.len() != self.dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: self.dim,
                    got: v.len(),
                });
            }
        }
        Ok(resp.vectors)
    }
}
