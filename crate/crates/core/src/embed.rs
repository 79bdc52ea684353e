//! Sentence embedders: a hashed character n-gram fallback that needs no
//! network, and a client for an OpenAI-style `/embeddings` endpoint.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::llm::remote::JsonPoster;
use crate::llm::{BackendError, RemoteConfig};

/// Unit-length embedding. Zero vectors are never constructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// L2-normalizes `values`; rejects empty, all-zero, or non-finite input.
    pub fn normalized(values: Vec<f32>) -> Result<Self> {
        let norm = values.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
        if values.is_empty() || norm == 0.0 || !norm.is_finite() {
            return Err(Error::Embedding(
                "cannot normalize a zero or non-finite vector".into(),
            ));
        }
        Ok(Self(
            values.into_iter().map(|v| (f64::from(v) / norm) as f32).collect(),
        ))
    }

    /// Wraps stored values as-is (already normalized when persisted).
    pub(crate) fn from_stored(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt()
    }

    /// Cosine similarity of two unit vectors (their dot product, in f64).
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| f64::from(*a) * f64::from(*b))
            .sum()
    }
}

pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;
    fn embed(&self, text: &str) -> Result<EmbeddingVector>;
}

/// Counts character 2- and 3-grams into 512 FNV-1a buckets, then normalizes.
#[derive(Debug, Clone)]
pub struct HashedNgramEmbedder {
    id: String,
    dimension: usize,
}

pub const HASHED_DIMENSION: usize = 512;

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        Self {
            id: format!("hashed-char-ngram-2-3-d{HASHED_DIMENSION}-fnv1a"),
            dimension: HASHED_DIMENSION,
        }
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl HashedNgramEmbedder {
    pub fn bucket(&self, ngram: &str) -> usize {
        (fnv1a(ngram.as_bytes()) % self.dimension as u64) as usize
    }
}

impl Embedder for HashedNgramEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let chars: Vec<char> = text.chars().collect();
        let mut counts = vec![0f32; self.dimension];
        let mut gram = String::new();
        for n in [2, 3] {
            for window in chars.windows(n) {
                gram.clear();
                gram.extend(window);
                counts[self.bucket(&gram)] += 1.0;
            }
        }
        if chars.len() < 2 {
            return Err(Error::Embedding("text too short to embed".into()));
        }
        EmbeddingVector::normalized(counts)
    }
}

/// POSTs `{model, input}` to `<base_url>/embeddings` and normalizes `data[0].embedding`.
#[derive(Debug)]
pub struct RemoteEmbedder {
    id: String,
    model: String,
    poster: JsonPoster,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteConfig, model: impl Into<String>) -> Self {
        let model = model.into();
        Self {
            id: format!("remote-embed:{}:{model}", config.base_url.trim_end_matches('/')),
            model,
            poster: JsonPoster::new(config),
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(Error::Embedding("cannot embed empty text".into()));
        }
        let (value, _) = self
            .poster
            .post("embeddings", &json!({"model": self.model, "input": text}))?;
        let values = value
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::MalformedResponse("missing data[0].embedding".into()))?
            .iter()
            .map(|v| v.as_f64().map(|f| f as f32))
            .collect::<Option<Vec<f32>>>()
            .ok_or_else(|| BackendError::MalformedResponse("non-numeric embedding".into()))?;
        EmbeddingVector::normalized(values)
    }
}
