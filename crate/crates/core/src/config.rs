//! Run configuration.
//!
//! Values are layered: built-in defaults, then a flat TOML file, then
//! command-line overrides. Credentials are never read from either layer; the
//! HTTP backend takes its key from `DC2_API_KEY`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::backend::{
    BackendError, Bounded, CachedBackend, HttpBackend, HttpConfig, MockBackend, MockScene, ResponseCache,
    SharedBackend, API_KEY_ENV, DEFAULT_TEMPERATURE,
};
use crate::conquer::ModelSettings;
use crate::divide::{DivideParams, DEFAULT_MAX_DEPTH, DEFAULT_PATCH_SIZE, DEFAULT_THETA};
use crate::geometry::DEFAULT_NMS_THRESHOLD;
use crate::inference::{PipelineParams, DEFAULT_ALPHA, DEFAULT_TOP_K};
use crate::prompts::PromptSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub patch_size: u32,
    pub theta: f64,
    pub alpha: f64,
    pub max_depth: u32,
    pub nms_threshold: f64,
    pub top_k: usize,
    pub temperature: f64,
    pub model: String,
    pub backend: BackendKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    /// Separate endpoint and model for the text-only runner.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_base_url: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_model: Option<String>,
    /// Maximum backend calls in flight, also the number of samples evaluated
    /// at once.
    pub concurrency: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_dir: Option<PathBuf>,
    pub leaf_preset: usize,
    /// JSON list of scenes the mock backend can see.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mock_scenes: Option<PathBuf>,
    pub mock_latency_ms: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            theta: DEFAULT_THETA,
            alpha: DEFAULT_ALPHA,
            max_depth: DEFAULT_MAX_DEPTH,
            nms_threshold: DEFAULT_NMS_THRESHOLD,
            top_k: DEFAULT_TOP_K,
            temperature: DEFAULT_TEMPERATURE,
            model: "default".into(),
            backend: BackendKind::Http,
            base_url: None,
            text_base_url: None,
            text_model: None,
            concurrency: 4,
            cache_dir: None,
            timeout_secs: 120,
            max_retries: 4,
            prompt_dir: None,
            leaf_preset: 1,
            mock_scenes: None,
            mock_latency_ms: 0,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "patch_size",
    "theta",
    "alpha",
    "max_depth",
    "nms_threshold",
    "top_k",
    "temperature",
    "model",
    "backend",
    "base_url",
    "text_base_url",
    "text_model",
    "concurrency",
    "cache_dir",
    "timeout_secs",
    "max_retries",
    "prompt_dir",
    "leaf_preset",
    "mock_scenes",
    "mock_latency_ms",
];

const SECRET_KEYS: &[&str] = &["api_key", "key", "token", "dc2_api_key"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("unknown config key {key:?}; valid keys: {}", CONFIG_KEYS.join(", "))]
    UnknownKey { key: String },
    #[error("{key:?} is a secret; set it through the {API_KEY_ENV} environment variable")]
    SecretKey { key: String },
    #[error("invalid value for {key:?}: {reason}")]
    Invalid { key: String, reason: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), reason: reason.into() }
}

fn defaults_table() -> Table {
    match Value::try_from(PipelineConfig::default()) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("config serializes to a table"),
    }
}

fn check_keys(table: &Table) -> Result<(), ConfigError> {
    for key in table.keys() {
        if SECRET_KEYS.contains(&key.to_lowercase().as_str()) {
            return Err(ConfigError::SecretKey { key: key.clone() });
        }
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey { key: key.clone() });
        }
    }
    Ok(())
}

/// Resolves a configuration from defaults, an optional file and overrides.
///
/// `overrides` are `(key, value)` pairs as given on the command line; they
/// take precedence over the file.
pub fn load_config(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<PipelineConfig, ConfigError> {
    let mut merged = defaults_table();
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let table: Table = text.parse().map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        check_keys(&table)?;
        merged.extend(table);
    }
    let flags: Table = overrides.iter().cloned().collect();
    check_keys(&flags)?;
    merged.extend(flags);

    // check each key against the defaults so a type error names its key
    for (key, value) in &merged {
        let mut probe = defaults_table();
        probe.insert(key.clone(), value.clone());
        if let Err(e) = Value::Table(probe).try_into::<PipelineConfig>() {
            return Err(invalid(key, e.message().to_string()));
        }
    }
    let config: PipelineConfig =
        Value::Table(merged).try_into().map_err(|e: toml::de::Error| invalid("config", e.message().to_string()))?;
    config.validate()?;
    Ok(config)
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.patch_size < 1 {
            return Err(invalid("patch_size", "must be at least 1"));
        }
        if !(self.theta.is_finite() && self.theta >= 0.0) {
            return Err(invalid("theta", format!("must be finite and >= 0 (got {})", self.theta)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid("alpha", format!("must be within [0, 1] (got {})", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(invalid("nms_threshold", format!("must be within [0, 1] (got {})", self.nms_threshold)));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(invalid("temperature", format!("must be >= 0 (got {})", self.temperature)));
        }
        if self.concurrency < 1 {
            return Err(invalid("concurrency", "must be at least 1"));
        }
        if !(1..=PromptSet::leaf_preset_count()).contains(&self.leaf_preset) {
            return Err(invalid("leaf_preset", format!("must be within 1..={}", PromptSet::leaf_preset_count())));
        }
        if self.model.trim().is_empty() {
            return Err(invalid("model", "must not be empty"));
        }
        Ok(())
    }

    pub fn pipeline_params(&self) -> PipelineParams {
        PipelineParams {
            divide: DivideParams { patch_size: self.patch_size, theta: self.theta, max_depth: self.max_depth },
            alpha: self.alpha,
            nms_threshold: self.nms_threshold,
            top_k: self.top_k,
        }
    }

    pub fn model_settings(&self) -> ModelSettings {
        ModelSettings { model: self.model.clone(), temperature: self.temperature }
    }

    pub fn text_model_settings(&self) -> ModelSettings {
        ModelSettings {
            model: self.text_model.clone().unwrap_or_else(|| self.model.clone()),
            temperature: self.temperature,
        }
    }

    pub fn prompts(&self) -> Result<PromptSet, ConfigError> {
        let set =
            PromptSet::with_leaf_preset(self.leaf_preset).ok_or_else(|| invalid("leaf_preset", "unknown preset"))?;
        match &self.prompt_dir {
            Some(dir) => set.override_from_dir(dir).map_err(|source| ConfigError::Io { path: dir.clone(), source }),
            None => Ok(set),
        }
    }

    /// The configured vision backend, wrapped with the response cache and
    /// the in-flight limit.
    pub fn build_backend(&self) -> Result<SharedBackend, ConfigError> {
        let raw: SharedBackend = match self.backend {
            BackendKind::Http => {
                let url =
                    self.base_url.as_deref().ok_or_else(|| invalid("base_url", "required for the http backend"))?;
                Arc::new(HttpBackend::new(self.http_config(url))?)
            }
            BackendKind::Mock => Arc::new(self.mock_backend()?),
        };
        self.wrap(raw)
    }

    /// The backend for the text-only runner: `text_base_url` when set,
    /// otherwise the main backend.
    pub fn build_text_backend(&self) -> Result<SharedBackend, ConfigError> {
        match &self.text_base_url {
            Some(url) => self.wrap(Arc::new(HttpBackend::new(self.http_config(url))?)),
            None => self.build_backend(),
        }
    }

    fn http_config(&self, url: &str) -> HttpConfig {
        let mut cfg = HttpConfig::new(url).with_env_key();
        cfg.timeout = Duration::from_secs(self.timeout_secs.max(1));
        cfg.max_retries = self.max_retries;
        cfg
    }

    fn mock_backend(&self) -> Result<MockBackend, ConfigError> {
        let scenes: Vec<MockScene> = match &self.mock_scenes {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
                serde_json::from_str(&text).map_err(|e| invalid("mock_scenes", e.to_string()))?
            }
            None => Vec::new(),
        };
        Ok(MockBackend::new(&scenes)?.with_latency(Duration::from_millis(self.mock_latency_ms)))
    }

    fn wrap(&self, raw: SharedBackend) -> Result<SharedBackend, ConfigError> {
        let bounded: SharedBackend = Arc::new(Bounded::new(raw, self.concurrency));
        Ok(match &self.cache_dir {
            Some(dir) => {
                let cache =
                    ResponseCache::on_disk(dir).map_err(|source| ConfigError::Io { path: dir.clone(), source })?;
                Arc::new(CachedBackend::new(bounded, cache))
            }
            None => bounded,
        })
    }
}
