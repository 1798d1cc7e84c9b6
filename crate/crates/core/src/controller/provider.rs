//! Chat-completion provider contract, the offline mock, and an
//! OpenAI-compatible HTTP client.

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::tokenize::truncate_words;

pub const ENV_ENDPOINT: &str = "KIQFS_LLM_ENDPOINT";
pub const ENV_MODEL: &str = "KIQFS_LLM_MODEL";
pub const ENV_API_KEY: &str = "KIQFS_LLM_API_KEY";

pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1";
pub const DEFAULT_MODEL: &str = "gpt-3.5-turbo-16k";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system: Option<String>,
    pub user: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    /// Wall time the provider reports for the call.
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderError {
    /// Worth retrying: rate limits, server errors, timeouts.
    Transient {
        status: Option<u16>,
        message: String,
    },
    Fatal {
        status: Option<u16>,
        message: String,
    },
}

impl ProviderError {
    pub fn is_transient(&self) -> bool {
        matches!(self, ProviderError::Transient { .. })
    }

    pub fn from_status(status: u16, message: impl Into<String>) -> Self {
        let message = message.into();
        if status == 429 || status == 408 || status >= 500 {
            ProviderError::Transient {
                status: Some(status),
                message,
            }
        } else {
            ProviderError::Fatal {
                status: Some(status),
                message,
            }
        }
    }
}

impl fmt::Display for ProviderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, status, message) = match self {
            ProviderError::Transient { status, message } => ("transient", status, message),
            ProviderError::Fatal { status, message } => ("fatal", status, message),
        };
        match status {
            Some(s) => write!(f, "{kind} error (status {s}): {message}"),
            None => write!(f, "{kind} error: {message}"),
        }
    }
}

pub trait LlmProvider: Send + Sync {
    fn model_id(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ProviderError>;
}

impl<P: LlmProvider + ?Sized> LlmProvider for Arc<P> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ProviderError> {
        (**self).complete(request)
    }
}

/// Deterministic offline provider. It answers with the first `words` words
/// of the top-ranked document of the prompt's final `Documents:` section and
/// keeps a log of every request it receives.
#[derive(Debug)]
pub struct MockProvider {
    words: usize,
    calls: Mutex<Vec<CompletionRequest>>,
}

impl Default for MockProvider {
    fn default() -> Self {
        MockProvider::new(250)
    }
}

impl MockProvider {
    pub const MODEL_ID: &'static str = "mock-echo";

    pub fn new(words: usize) -> Self {
        MockProvider {
            words,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<CompletionRequest> {
        self.calls.lock().clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().len()
    }
}

/// Text of the first document listed after the last `Documents:` header.
pub fn top_document(prompt: &str) -> Option<&str> {
    let start = prompt.rfind("Documents:\n")? + "Documents:\n".len();
    let line = prompt[start..].lines().next()?;
    let body = match line.find("]: ") {
        Some(i) if line.starts_with("Document [") => &line[i + 3..],
        _ => line,
    };
    Some(body)
}

impl LlmProvider for MockProvider {
    fn model_id(&self) -> &str {
        Self::MODEL_ID
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ProviderError> {
        self.calls.lock().push(request.clone());
        let doc = top_document(&request.user).unwrap_or("");
        Ok(Completion {
            text: truncate_words(doc, self.words).to_string(),
            latency_ms: 0,
        })
    }
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct HttpProvider {
    endpoint: String,
    model: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(
        endpoint: &str,
        model: &str,
        api_key: &str,
        timeout: Duration,
    ) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Fatal {
                status: None,
                message: format!("http client: {e}"),
            })?;
        Ok(HttpProvider {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key: api_key.to_string(),
            client,
        })
    }

    pub fn body(&self, request: &CompletionRequest) -> serde_json::Value {
        let mut messages = Vec::new();
        if let Some(system) = &request.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": request.user}));
        json!({
            "model": self.model,
            "messages": messages,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

impl LlmProvider for HttpProvider {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ProviderError> {
        let started = Instant::now();
        let resp = self
            .client
            .post(format!("{}/chat/completions", self.endpoint))
            .bearer_auth(&self.api_key)
            .json(&self.body(request))
            .send()
            .map_err(|e| ProviderError::Transient {
                status: None,
                message: e.to_string(),
            })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| ProviderError::Transient {
            status: Some(status),
            message: e.to_string(),
        })?;
        if !(200..300).contains(&status) {
            return Err(ProviderError::from_status(status, text));
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| ProviderError::Fatal {
                status: Some(status),
                message: format!("malformed response: {e}"),
            })?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        Ok(Completion {
            text: content,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

/// Retry budget with exponential backoff for transient provider failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    /// Delay before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Provider selection from a name plus the environment. A remote provider
/// without an API key falls back to the mock.
pub fn provider_from_env(
    name: &str,
    timeout: Duration,
) -> Result<Arc<dyn LlmProvider>, ProviderError> {
    match name {
        "mock" => Ok(Arc::new(MockProvider::default())),
        "openai" | "http" => {
            let Ok(key) = std::env::var(ENV_API_KEY) else {
                log::warn!(
                    "{ENV_API_KEY} is not set: using the offline mock provider instead of {name}; \
                     summaries will NOT come from a language model"
                );
                eprintln!("warning: {ENV_API_KEY} not set, falling back to the mock provider");
                return Ok(Arc::new(MockProvider::default()));
            };
            let endpoint = std::env::var(ENV_ENDPOINT).unwrap_or_else(|_| DEFAULT_ENDPOINT.into());
            let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| DEFAULT_MODEL.into());
            Ok(Arc::new(HttpProvider::new(
                &endpoint, &model, &key, timeout,
            )?))
        }
        other => Err(ProviderError::Fatal {
            status: None,
            message: format!("unknown provider {other:?} (expected mock or openai)"),
        }),
    }
}
