//! Chat-completion clients for the prompt-driven steps, with a deterministic
//! offline stub. This is the only module that performs network I/O.

mod http;
pub mod prompts;
mod stub;

pub use http::{Completion, HttpClient};
pub use prompts::PromptTemplate;
pub use stub::StubClient;

use serde::{Deserialize, Serialize};

pub const ENV_ENDPOINT: &str = "TRUEBRIEF_LLM_ENDPOINT";
pub const ENV_KEY: &str = "TRUEBRIEF_LLM_KEY";
pub const ENV_MODEL: &str = "TRUEBRIEF_LLM_MODEL";

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("prompt rendering failed: {0}")]
    Render(String),
    #[error("network failure after {attempts} attempt(s): {message}")]
    Network { attempts: u32, message: String },
    #[error("HTTP {status} after {attempts} attempt(s): {body}")]
    Http { status: u16, attempts: u32, body: String },
    #[error("unparseable response: {0}")]
    Parse(String),
    #[error("stub client cannot answer this prompt: {0}")]
    Unsupported(String),
    #[error("gateway configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// One chat-completion call. Endpoint, model, timeout and retry budget come
/// from the client's [`GatewayConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn user(prompt: impl Into<String>) -> Self {
        Self {
            messages: vec![ChatMessage::user(prompt)],
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError>;

    /// `true` for the deterministic offline stub.
    fn is_stub(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatewayConfig {
    /// Forces the stub client even when an endpoint is configured.
    pub offline: bool,
    /// Base URL, e.g. `https://host/v1`.
    pub endpoint: Option<String>,
    /// Appended to `endpoint`.
    pub path: String,
    pub model: String,
    /// Read from the environment; never written to config snapshots.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// First retry delay; doubles on each further attempt.
    pub backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub max_in_flight: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Seed of the stub client.
    pub seed: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            offline: false,
            endpoint: None,
            path: "/chat/completions".into(),
            model: "gpt-4o".into(),
            api_key: None,
            timeout_secs: 60.0,
            max_retries: 3,
            backoff_ms: 500,
            max_backoff_ms: 30_000,
            max_in_flight: 4,
            temperature: 0.0,
            max_tokens: 512,
            seed: 0,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(GatewayError::Config("timeout_secs must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies `TRUEBRIEF_LLM_*` environment overrides through `lookup`.
    pub fn apply_env_with(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(v) = lookup(ENV_ENDPOINT) {
            self.endpoint = Some(v);
        }
        if let Some(v) = lookup(ENV_KEY) {
            self.api_key = Some(v);
        }
        if let Some(v) = lookup(ENV_MODEL) {
            self.model = v;
        }
    }

    pub fn apply_env(&mut self) {
        self.apply_env_with(|k| std::env::var(k).ok());
    }

    pub fn uses_stub(&self) -> bool {
        self.offline || self.endpoint.is_none()
    }

    pub fn request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }
}

/// Stub client when offline or no endpoint is set, HTTP client otherwise.
pub fn build_client(cfg: &GatewayConfig) -> Result<Box<dyn LlmClient>, GatewayError> {
    cfg.validate()?;
    if cfg.uses_stub() {
        Ok(Box::new(StubClient::new(cfg.seed)))
    } else {
        Ok(Box::new(HttpClient::new(cfg.clone())?))
    }
}

/// Strips a Markdown code fence that some models wrap around JSON output.
pub fn strip_code_fence(text: &str) -> &str {
    let t = text.trim();
    let Some(inner) = t.strip_prefix("```") else {
        return t;
    };
    let inner = inner.strip_suffix("```").unwrap_or(inner);
    let inner = inner.strip_prefix("json").unwrap_or(inner);
    inner.trim()
}
