//! Text embedding providers and similarity primitives.
//!
//! The engine only ever relies on the dimension of a vector, never on which
//! provider produced it. [`HashingEmbedder`] is the deterministic offline
//! provider; [`ExternalEmbedder`] talks to an HTTP embedding service.

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::text::{fnv1a64, tokenize};

/// Tolerance on the Euclidean norm of a unit vector.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Default embedding dimension for the hashing provider.
pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
}

/// A unit-norm embedding.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// L2-normalizes `values`.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, EmbedError> {
        let norm = l2_norm(&values);
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbedError::ZeroNorm);
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self(values))
    }

    /// Wraps values that must already be unit norm.
    pub fn from_unit(values: Vec<f64>) -> Result<Self, EmbedError> {
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(EmbedError::ZeroNorm);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

impl fmt::Debug for EmbeddingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EmbeddingVector(dim={})", self.0.len())
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = String;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        EmbeddingVector::from_unit(values).map_err(|_| "embedding is not unit norm".to_owned())
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]` against rounding.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    cosine_slices(a.as_slice(), b.as_slice())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub(crate) fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimensionMismatch { left: a.len(), right: b.len() });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Something that turns text into unit vectors of a fixed dimension.
///
/// Implementations may block (remote providers do); async callers should run
/// them on a blocking thread.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
}

/// Signed feature hashing of lowercased unigrams and bigrams.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    bigram_weight: f64,
}

impl HashingEmbedder {
    pub const DEFAULT_BIGRAM_WEIGHT: f64 = 0.25;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, bigram_weight: Self::DEFAULT_BIGRAM_WEIGHT }
    }

    fn add_feature(&self, acc: &mut [f64], feature: &str, weight: f64) {
        let h = fnv1a64(feature.as_bytes());
        let bucket = (h % self.dim as u64) as usize;
        let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
        acc[bucket] += sign * weight;
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIM)
    }
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut tokens = tokenize(trimmed);
        if tokens.is_empty() {
            // Pure-symbol input such as "∫ dx": hash the raw text instead.
            tokens.push(trimmed.to_owned());
        }
        let mut acc = vec![0.0; self.dim];
        for t in &tokens {
            self.add_feature(&mut acc, t, 1.0);
        }
        for pair in tokens.windows(2) {
            let bigram = format!("{}\u{1f}{}", pair[0], pair[1]);
            self.add_feature(&mut acc, &bigram, self.bigram_weight);
        }
        match EmbeddingVector::normalized(acc) {
            Ok(v) => Ok(v),
            // Every feature cancelled under signed hashing; fall back to a
            // single bucket keyed on the whole text.
            Err(_) => {
                let mut acc = vec![0.0; self.dim];
                self.add_feature(&mut acc, trimmed, 1.0);
                EmbeddingVector::normalized(acc)
            }
        }
    }
}

/// HTTP embedding provider: `POST endpoint {"model", "input"}` returning
/// `{"embedding": [f64]}`.
pub struct ExternalEmbedder {
    endpoint: String,
    model: String,
    dim: usize,
    client: reqwest::blocking::Client,
}

impl ExternalEmbedder {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, dim: usize, timeout: Duration) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EmbedError::ProviderUnavailable(e.to_string()))?;
        Ok(Self { endpoint: endpoint.into(), model: model.into(), dim, client })
    }
}

#[derive(Deserialize)]
struct ExternalResponse {
    embedding: Vec<f64>,
}

impl Embedder for ExternalEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let unavailable = |e: reqwest::Error| EmbedError::ProviderUnavailable(e.to_string());
        let body: ExternalResponse = self
            .client
            .post(&self.endpoint)
            .json(&serde_json::json!({ "model": self.model, "input": text }))
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(unavailable)?
            .json()
            .map_err(unavailable)?;
        if body.embedding.len() != self.dim {
            return Err(EmbedError::DimensionMismatch { left: body.embedding.len(), right: self.dim });
        }
        EmbeddingVector::normalized(body.embedding)
    }
}
