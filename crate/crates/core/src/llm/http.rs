//! OpenAI-compatible `/completions` and `/embeddings` client.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{apply_stop, BackendError, CompletionBackend, CompletionRequest, CompletionResult, EmbeddingBackend, EmbeddingVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL, e.g. `https://api.openai.com/v1`.
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub embedding_model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Embedding dimension the server is expected to return.
    #[serde(default)]
    pub embedding_dimension: Option<usize>,
}

fn default_key_env() -> String {
    "KVQA_API_KEY".into()
}

fn default_timeout() -> u64 {
    60
}

pub struct HttpBackend {
    agent: ureq::Agent,
    config: HttpConfig,
    api_key: Option<String>,
    id: String,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl HttpBackend {
    /// Reads the API key from the configured environment variable, if set.
    pub fn from_env(config: HttpConfig) -> Self {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Self::with_key(config, api_key)
    }

    pub fn with_key(config: HttpConfig, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        let id = format!("http:{}", config.model);
        HttpBackend {
            agent,
            config,
            api_key,
            id,
        }
    }

    fn post(&self, route: &str, body: &serde_json::Value) -> Result<String, BackendError> {
        let url = format!("{}/{}", self.config.endpoint.trim_end_matches('/'), route);
        let mut request = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        match status {
            200..=299 => Ok(text),
            408 | 429 | 500..=599 => Err(BackendError::Transport(format!("http {status}: {text}"))),
            _ => Err(BackendError::Refusal(format!("http {status}: {text}"))),
        }
    }
}

impl CompletionBackend for HttpBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.validate()?;
        let mut body = json!({
            "model": self.config.model,
            "prompt": request.prompt,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        });
        if !request.stop_sequences.is_empty() {
            body["stop"] = json!(request.stop_sequences);
        }
        if let Some(seed) = request.seed_hint {
            body["seed"] = json!(seed);
        }
        let raw = self.post("completions", &body)?;
        let parsed: CompletionResponse = serde_json::from_str(&raw)
            .map_err(|e| BackendError::Refusal(format!("unexpected completion payload: {e}")))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .ok_or_else(|| BackendError::Refusal("completion returned no choices".into()))?;
        Ok(CompletionResult {
            text: apply_stop(&text, &request.stop_sequences),
            backend_id: self.id.clone(),
            from_cache: false,
        })
    }
}

impl EmbeddingBackend for HttpBackend {
    fn dimension(&self) -> usize {
        self.config.embedding_dimension.unwrap_or(0)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(BackendError::InvalidRequest("cannot embed empty text".into()));
        }
        let model = self
            .config
            .embedding_model
            .as_deref()
            .unwrap_or(&self.config.model);
        let raw = self.post("embeddings", &json!({ "model": model, "input": texts }))?;
        let mut parsed: EmbeddingResponse = serde_json::from_str(&raw)
            .map_err(|e| BackendError::Refusal(format!("unexpected embedding payload: {e}")))?;
        if parsed.data.len() != texts.len() {
            return Err(BackendError::Refusal(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        parsed.data.sort_by_key(|d| d.index.unwrap_or(0));
        let expected = self
            .config
            .embedding_dimension
            .unwrap_or(parsed.data[0].embedding.len());
        parsed
            .data
            .into_iter()
            .map(|d| {
                if d.embedding.len() != expected {
                    return Err(BackendError::DimensionMismatch {
                        expected,
                        got: d.embedding.len(),
                    });
                }
                if d.embedding.iter().any(|v| !v.is_finite()) {
                    return Err(BackendError::Refusal("non-finite embedding value".into()));
                }
                Ok(EmbeddingVector::new(d.embedding))
            })
            .collect()
    }
}
