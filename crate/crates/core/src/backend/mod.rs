//! Chat-with-image model backends.
//!
//! Everything downstream talks to a [`ChatBackend`]. Concrete backends are an
//! OpenAI-compatible HTTP client and a deterministic pixel-reading mock;
//! wrappers add response caching, a process-wide in-flight limit, call
//! counting and request recording.

mod cache;
mod http;
mod limit;
mod mock;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CachedBackend, ResponseCache};
pub use http::{parse_completion, wire_body, HttpBackend, HttpConfig, API_KEY_ENV};
pub use limit::{Bounded, CallCounter, Recorder};
pub use mock::{MockBackend, MockObject, MockScene, EMPTY_REGION_CAPTION};

pub const DEFAULT_TEMPERATURE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system: Option<String>,
    pub user_text: String,
    /// PNG-encoded image; base64-encoded only at the wire boundary.
    #[serde(with = "opt_base64", default)]
    pub image_png: Option<Vec<u8>>,
    pub temperature: f64,
    pub want_logprobs: bool,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            system: None,
            user_text: user_text.into(),
            image_png: None,
            temperature: DEFAULT_TEMPERATURE,
            want_logprobs: false,
        }
    }

    pub fn with_system(mut self, system: impl Into<String>) -> Self {
        self.system = Some(system.into());
        self
    }

    pub fn with_image(mut self, png: Vec<u8>) -> Self {
        self.image_png = Some(png);
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_logprobs(mut self, want: bool) -> Self {
        self.want_logprobs = want;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    /// Natural-log probability of each generated token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: text.into(), token_logprobs: None }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("authentication failed (HTTP {status}): {body}")]
    Auth { status: u16, body: String },
    #[error("malformed endpoint reply: {reason}")]
    Malformed { reason: String, raw: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
}

/// A chat model that accepts text plus an optional image.
///
/// Implementations must be shareable across threads.
pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).chat(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).chat(request)
    }
}

pub type SharedBackend = Arc<dyn ChatBackend>;

/// Stable SHA-256 digest identifying a request for caching.
///
/// Every field is length-prefixed so distinct requests cannot collide by
/// concatenation.
pub fn cache_key(request: &ChatRequest) -> String {
    fn field(h: &mut Sha256, tag: u8, bytes: Option<&[u8]>) {
        h.update([tag]);
        match bytes {
            Some(b) => {
                h.update([1]);
                h.update((b.len() as u64).to_le_bytes());
                h.update(b);
            }
            None => h.update([0]),
        }
    }
    let mut h = Sha256::new();
    h.update(b"dc2-chat/1");
    field(&mut h, b'm', Some(request.model.as_bytes()));
    field(&mut h, b's', request.system.as_deref().map(str::as_bytes));
    field(&mut h, b'u', Some(request.user_text.as_bytes()));
    field(&mut h, b'i', request.image_png.as_deref());
    field(&mut h, b't', Some(&request.temperature.to_bits().to_le_bytes()));
    field(&mut h, b'l', Some(&[request.want_logprobs as u8]));
    hex::encode(h.finalize())
}

mod opt_base64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(bytes) => s.serialize_some(&STANDARD.encode(bytes)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        let s: Option<String> = Option::deserialize(d)?;
        s.map(|s| STANDARD.decode(s).map_err(serde::de::Error::custom)).transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req() -> ChatRequest {
        ChatRequest::new("m", "hello").with_image(vec![1, 2, 3])
    }

    #[test]
    fn identical_requests_share_key() {
        assert_eq!(cache_key(&req()), cache_key(&req()));
        assert_eq!(cache_key(&req()).len(), 64);
    }

    #[test]
    fn image_bytes_change_key() {
        let other = ChatRequest::new("m", "hello").with_image(vec![1, 2, 4]);
        assert_ne!(cache_key(&req()), cache_key(&other));
    }

    #[test]
    fn temperature_changes_key() {
        assert_ne!(cache_key(&req()), cache_key(&req().with_temperature(0.3)));
    }

    #[test]
    fn field_boundaries_matter() {
        let a = ChatRequest::new("ab", "c");
        let b = ChatRequest::new("a", "bc");
        assert_ne!(cache_key(&a), cache_key(&b));
        let c = ChatRequest::new("m", "x").with_system("");
        assert_ne!(cache_key(&ChatRequest::new("m", "x")), cache_key(&c));
    }

    #[test]
    fn key_is_stable_across_runs() {
        // frozen value; a change here invalidates every on-disk cache
        assert_eq!(
            cache_key(&ChatRequest::new("model", "text")),
            "3df2357b056d371c38e886baac66f2bf67e367e716911679521bd5f27f8b31d4"
        );
    }
}
