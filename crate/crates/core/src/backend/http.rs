//! Client for OpenAI-compatible `/chat/completions` endpoints.

use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse};

/// Environment variable holding the bearer credential.
pub const API_KEY_ENV: &str = "DC2_API_KEY";

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Base URL up to and including the API version, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            max_retries: 4,
            initial_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(30),
        }
    }

    /// Reads the credential from [`API_KEY_ENV`].
    pub fn with_env_key(mut self) -> Self {
        self.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        self
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt);
        self.initial_backoff.saturating_mul(factor).min(self.max_backoff)
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
    endpoint: String,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        if config.base_url.trim().is_empty() {
            return Err(BackendError::Config("base URL is empty".into()));
        }
        let endpoint = format!("{}/chat/completions", config.base_url.trim_end_matches('/'));
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        Ok(Self { config, agent, endpoint })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn send_once(&self, body: &Value) -> Result<String, Attempt> {
        let mut req = self.agent.post(&self.endpoint).set("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body) {
            Ok(resp) => resp.into_string().map_err(|e| Attempt::Transient(format!("reading body: {e}"))),
            Err(ureq::Error::Status(status, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                Err(match status {
                    401 | 403 => Attempt::Fatal(BackendError::Auth { status, body }),
                    408 | 429 | 500..=599 => Attempt::Transient(format!("HTTP {status}: {body}")),
                    _ => Attempt::Fatal(BackendError::Http { status, body }),
                })
            }
            Err(ureq::Error::Transport(t)) => Err(Attempt::Transient(t.to_string())),
        }
    }
}

enum Attempt {
    Transient(String),
    Fatal(BackendError),
}

/// JSON body sent to the endpoint for a request.
pub fn wire_body(request: &ChatRequest) -> Value {
    let mut messages = Vec::new();
    if let Some(system) = &request.system {
        messages.push(json!({ "role": "system", "content": system }));
    }
    let user_content = match &request.image_png {
        Some(png) => json!([
            { "type": "text", "text": request.user_text },
            {
                "type": "image_url",
                "image_url": { "url": format!("data:image/png;base64,{}", STANDARD.encode(png)) }
            }
        ]),
        None => json!(request.user_text),
    };
    messages.push(json!({ "role": "user", "content": user_content }));

    let mut body = json!({
        "model": request.model,
        "messages": messages,
        "temperature": request.temperature,
        "stream": false,
    });
    if request.want_logprobs {
        body["logprobs"] = json!(true);
    }
    body
}

/// Extracts text and token log-probabilities from a completion payload.
pub fn parse_completion(raw: &str) -> Result<ChatResponse, BackendError> {
    let malformed = |reason: &str| BackendError::Malformed { reason: reason.to_string(), raw: raw.to_string() };
    let v: Value = serde_json::from_str(raw).map_err(|e| malformed(&format!("invalid JSON: {e}")))?;
    let choice = v.get("choices").and_then(|c| c.get(0)).ok_or_else(|| malformed("missing choices[0]"))?;
    let content =
        choice.get("message").and_then(|m| m.get("content")).ok_or_else(|| malformed("missing message.content"))?;
    let text = match content {
        Value::String(s) => s.clone(),
        // some servers return content as a list of typed parts
        Value::Array(parts) => {
            parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect::<Vec<_>>().join("")
        }
        Value::Null => String::new(),
        _ => return Err(malformed("message.content is neither string nor parts")),
    };
    let token_logprobs = choice.get("logprobs").and_then(|l| l.get("content")).and_then(Value::as_array).map(|toks| {
        toks.iter().filter_map(|t| t.get("logprob").and_then(Value::as_f64)).map(|lp| lp.min(0.0)).collect::<Vec<_>>()
    });
    Ok(ChatResponse { text, token_logprobs })
}

impl ChatBackend for HttpBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        if !(request.temperature >= 0.0) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be non-negative, got {}",
                request.temperature
            )));
        }
        let body = wire_body(request);
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self.config.backoff(attempt - 1);
                debug!(attempt, ?wait, "retrying chat request");
                thread::sleep(wait);
            }
            match self.send_once(&body) {
                Ok(raw) => return parse_completion(&raw),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transient(msg)) => {
                    warn!(attempt, error = %msg, "transient backend failure");
                    last = msg;
                }
            }
        }
        Err(BackendError::RetriesExhausted { attempts, last })
    }
}
