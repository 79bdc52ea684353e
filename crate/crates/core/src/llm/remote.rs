use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, CompletionRequest, CompletionResponse};

pub const ENV_API_BASE: &str = "GEE_API_BASE";
pub const ENV_API_KEY: &str = "GEE_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            initial_backoff: Duration::from_secs(1),
            max_backoff: Duration::from_secs(60),
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry.min(16));
        self.initial_backoff.saturating_mul(factor).min(self.max_backoff)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub timeout: Duration,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            retry: RetryPolicy::default(),
            max_in_flight: 8,
            timeout: Duration::from_secs(300),
        }
    }

    /// Reads `GEE_API_BASE` (required) and `GEE_API_KEY` (optional).
    pub fn from_env() -> Result<Self, BackendError> {
        let base = std::env::var(ENV_API_BASE)
            .map_err(|_| BackendError::InvalidRequest(format!("{ENV_API_BASE} is not set")))?;
        let mut cfg = Self::new(base);
        cfg.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        Ok(cfg)
    }
}

/// Counting semaphore capping concurrent remote calls.
#[derive(Debug)]
struct InFlightLimiter {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlightLimiter);

impl InFlightLimiter {
    fn new(width: usize) -> Self {
        Self {
            available: Mutex::new(width.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.available.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.freed.notify_one();
    }
}

fn retryable(status: u16) -> bool {
    status == 408 || status == 429 || (500..600).contains(&status)
}

fn excerpt(body: &str) -> String {
    const MAX: usize = 512;
    if body.len() <= MAX {
        return body.to_owned();
    }
    let mut cut = MAX;
    while !body.is_char_boundary(cut) {
        cut -= 1;
    }
    format!("{}...", &body[..cut])
}

/// JSON-over-HTTP poster with retry and an in-flight cap, shared by the
/// chat and embedding clients.
#[derive(Debug)]
pub(crate) struct JsonPoster {
    agent: ureq::Agent,
    config: RemoteConfig,
    limiter: InFlightLimiter,
}

impl JsonPoster {
    pub(crate) fn new(config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        Self {
            agent,
            limiter: InFlightLimiter::new(config.max_in_flight),
            config,
        }
    }

    /// Returns the parsed body and the number of retries it took.
    pub(crate) fn post(&self, path: &str, body: &Value) -> Result<(Value, u32), BackendError> {
        let url = format!("{}/{}", self.config.base_url.trim_end_matches('/'), path);
        let policy = self.config.retry;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let outcome = {
                let _permit = self.limiter.acquire();
                let mut req = self.agent.post(&url).header("Content-Type", "application/json");
                if let Some(key) = &self.config.api_key {
                    req = req.header("Authorization", format!("Bearer {key}"));
                }
                req.send_json(body).and_then(|mut resp| {
                    let status = resp.status().as_u16();
                    resp.body_mut().read_to_string().map(|text| (status, text))
                })
            };
            let last = attempt >= policy.max_attempts;
            match outcome {
                Ok((status, text)) if (200..300).contains(&status) => {
                    let value: Value = serde_json::from_str(&text)
                        .map_err(|e| BackendError::MalformedResponse(format!("{e}: {}", excerpt(&text))))?;
                    return Ok((value, attempt - 1));
                }
                Ok((status @ (401 | 403), text)) => {
                    return Err(BackendError::Authentication {
                        status,
                        body: excerpt(&text),
                    })
                }
                Ok((status, text)) if !retryable(status) || last => {
                    return Err(BackendError::Http {
                        status,
                        attempts: attempt,
                        body: excerpt(&text),
                    })
                }
                Err(e) if last => {
                    return Err(BackendError::Transport {
                        attempts: attempt,
                        message: e.to_string(),
                    })
                }
                Ok((status, _)) => log::warn!("{url}: HTTP {status}, retrying (attempt {attempt})"),
                Err(e) => log::warn!("{url}: {e}, retrying (attempt {attempt})"),
            }
            std::thread::sleep(policy.backoff(attempt - 1));
        }
    }
}

/// Chat-completions client: one POST of `{model, messages, temperature, max_tokens}`
/// to `<base_url>/chat/completions`, returning the first choice's content.
#[derive(Debug)]
pub struct RemoteBackend {
    id: String,
    poster: JsonPoster,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        Self {
            id: format!("remote:{}", config.base_url.trim_end_matches('/')),
            poster: JsonPoster::new(config),
        }
    }
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        request.validate()?;
        let body = json!({
            "model": request.model_name,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        let (value, retries) = self.poster.post("chat/completions", &body)?;
        let text = value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| {
                BackendError::MalformedResponse(format!(
                    "missing choices[0].message.content in {}",
                    excerpt(&value.to_string())
                ))
            })?;
        Ok(CompletionResponse {
            text: text.to_owned(),
            backend_id: self.id.clone(),
            cached: false,
            retries,
        })
    }
}
