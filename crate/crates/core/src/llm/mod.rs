//! Completion and embedding backends.
//!
//! [`CompletionBackend`] and [`EmbeddingBackend`] are the only way the
//! pipeline talks to a model. Implementations here: a transcript-driven
//! [`ScriptedBackend`], a closure-driven [`FnBackend`] for fixtures, the
//! token-hashing [`HashingEmbedder`], the persistent [`CachedBackend`]
//! wrapper, [`Retrying`], and (feature `http`) an OpenAI-compatible client.

mod cache;
mod embed;
#[cfg(feature = "http")]
mod http;
mod retry;
mod scripted;

pub use cache::{CachedBackend, CachedEmbedder};
pub use embed::{HashingEmbedder, FALLBACK_DIMENSION};
#[cfg(feature = "http")]
pub use http::{HttpBackend, HttpConfig};
pub use retry::{Retrying, RetryPolicy};
pub use scripted::{FnBackend, ScriptedBackend, TranscriptEntry};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend refused: {0}")]
    Refusal(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache error: {0}")]
    Cache(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop_sequences: Vec<String>,
    pub seed_hint: Option<u64>,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, max_tokens: u32, temperature: f64) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            max_tokens,
            temperature,
            stop_sequences: Vec::new(),
            seed_hint: None,
        }
    }

    pub fn with_stop(mut self, stop: Vec<String>) -> Self {
        self.stop_sequences = stop;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.prompt.is_empty() {
            return Err(BackendError::InvalidRequest("prompt is empty".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub backend_id: String,
    pub from_cache: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        EmbeddingVector { values }
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub trait CompletionBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError>;
}

pub trait EmbeddingBackend: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError>;
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for &B {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        (**self).complete(request)
    }
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for Box<B> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        (**self).complete(request)
    }
}

impl<B: EmbeddingBackend + ?Sized> EmbeddingBackend for &B {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        (**self).embed(texts)
    }
}

impl<B: EmbeddingBackend + ?Sized> EmbeddingBackend for Box<B> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        (**self).embed(texts)
    }
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    backend_id: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    stop_sequences: &'a [String],
    seed_hint: Option<u64>,
}

/// Lowercase hex SHA-256 over every request field plus the backend id.
pub fn cache_key(request: &CompletionRequest, backend_id: &str) -> String {
    let material = KeyMaterial {
        backend_id,
        prompt: &request.prompt,
        max_tokens: request.max_tokens,
        temperature: request.temperature,
        stop_sequences: &request.stop_sequences,
        seed_hint: request.seed_hint,
    };
    let bytes = serde_json::to_vec(&material).expect("key material serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Cuts `text` at the earliest occurrence of any stop sequence.
pub fn apply_stop(text: &str, stop_sequences: &[String]) -> String {
    let cut = stop_sequences
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    text[..cut].to_string()
}
