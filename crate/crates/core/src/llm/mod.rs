//! Completion transport: a chat-completions HTTP client, a deterministic
//! offline mock, a content-addressed response cache, and the prompt catalog.

mod cache;
mod mock;
pub(crate) mod remote;
pub mod template;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use cache::{cache_key, cached_complete, CacheEntry, ResponseCache};
pub use mock::{MissPolicy, MockBackend, MockRule};
pub use remote::{RemoteBackend, RemoteConfig, RetryPolicy, ENV_API_BASE, ENV_API_KEY};
pub use template::{PromptCatalog, PromptTemplate};

/// Explanation and detection outputs are long-form.
pub const ANALYSIS_MAX_TOKENS: u32 = 1024;
/// Corrections are near-copies of the input.
pub const CORRECTION_MAX_TOKENS: u32 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_name: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl CompletionRequest {
    /// A request carrying `prompt` as its only (user) message, at temperature 0.
    pub fn single_user(
        model_name: impl Into<String>,
        prompt: impl Into<String>,
        max_output_tokens: u32,
    ) -> Self {
        Self {
            model_name: model_name.into(),
            messages: vec![Message {
                role: Role::User,
                content: prompt.into(),
            }],
            temperature: 0.0,
            max_output_tokens,
        }
    }

    pub fn last_user_content(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.last_user_content().is_none() {
            return Err(BackendError::InvalidRequest("no user message".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(BackendError::InvalidRequest(
                "max_output_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    /// Raw model output, untrimmed.
    pub text: String,
    pub backend_id: String,
    pub cached: bool,
    /// Retried attempts before this response (0 when the first attempt succeeded).
    #[serde(default)]
    pub retries: u32,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("authentication failed (HTTP {status}): {body}")]
    Authentication { status: u16, body: String },
    #[error("HTTP {status} after {attempts} attempt(s): {body}")]
    Http {
        status: u16,
        attempts: u32,
        body: String,
    },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("no fixture for prompt sha256:{prompt_hash}")]
    FixtureMiss { prompt_hash: String },
    #[error("mock fixture: {0}")]
    Fixture(String),
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError>;
}

/// A backend bound to a model name and an optional cache: the handle the
/// database builder and the prediction pipeline talk to.
#[derive(Clone)]
pub struct LlmClient {
    pub backend: Arc<dyn Backend>,
    pub cache: Option<Arc<ResponseCache>>,
    pub model: String,
    pub temperature: f64,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn Backend>, model: impl Into<String>) -> Self {
        Self {
            backend,
            cache: None,
            model: model.into(),
            temperature: 0.0,
        }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn complete_prompt(
        &self,
        prompt: &str,
        max_output_tokens: u32,
    ) -> Result<CompletionResponse, BackendError> {
        let mut request = CompletionRequest::single_user(&self.model, prompt, max_output_tokens);
        request.temperature = self.temperature;
        cached_complete(self.cache.as_deref(), self.backend.as_ref(), &request)
    }
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("backend", &self.backend.id())
            .field("model", &self.model)
            .field("cached", &self.cache.is_some())
            .finish()
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
