//! Conquer stage: patch captions and object lists from the backend.

use std::collections::BTreeSet;

use serde_json::Value;
use thiserror::Error;

use crate::backend::{BackendError, ChatRequest, SharedBackend, DEFAULT_TEMPERATURE};
use crate::combine::normalize_name;
use crate::divide::{PatchImage, DEFAULT_PATCH_SIZE};
use crate::prompts::PromptSet;
use crate::raster::{downsample_to_fit, encode_png, Raster};

#[derive(Debug, Error)]
pub enum ConquerError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("non-leaf caption needs at least one child caption")]
    NoChildCaptions,
    #[error("could not parse an object list from reply: {0}")]
    Unparseable(String),
}

/// Model name and sampling settings shared by every call of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub model: String,
    pub temperature: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self { model: "default".into(), temperature: DEFAULT_TEMPERATURE }
    }
}

/// Encodes a raster for a request, downsampled so its longest side is at
/// most `max_side`.
pub fn encode_for_model(pixels: &Raster, max_side: u32) -> Vec<u8> {
    encode_png(&downsample_to_fit(pixels, max_side))
}

#[derive(Clone)]
pub struct Conquer {
    backend: SharedBackend,
    prompts: PromptSet,
    settings: ModelSettings,
    patch_size: u32,
}

impl Conquer {
    pub fn new(backend: SharedBackend, prompts: PromptSet, settings: ModelSettings) -> Self {
        Self { backend, prompts, settings, patch_size: DEFAULT_PATCH_SIZE }
    }

    pub fn with_patch_size(mut self, patch_size: u32) -> Self {
        self.patch_size = patch_size.max(1);
        self
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    fn request(&self, text: String) -> ChatRequest {
        ChatRequest::new(self.settings.model.clone(), text).with_temperature(self.settings.temperature)
    }

    pub fn caption_leaf(&self, patch: &PatchImage) -> Result<String, ConquerError> {
        let req = self
            .request(self.prompts.leaf_prompt().to_string())
            .with_image(encode_for_model(&patch.pixels, self.patch_size));
        Ok(self.backend.chat(&req)?.text)
    }

    pub fn caption_non_leaf(&self, patch: &PatchImage, child_captions: &[String]) -> Result<String, ConquerError> {
        if child_captions.is_empty() {
            return Err(ConquerError::NoChildCaptions);
        }
        let req = self
            .request(self.prompts.non_leaf_prompt(child_captions))
            .with_image(encode_for_model(&patch.pixels, self.patch_size));
        Ok(self.backend.chat(&req)?.text)
    }

    /// Asks the backend for the objects named in `caption`.
    ///
    /// An empty caption short-circuits to the empty set. A reply that cannot
    /// be parsed is returned as [`ConquerError::Unparseable`]; callers treat
    /// it as "no objects".
    pub fn extract_objects(&self, caption: &str) -> Result<BTreeSet<String>, ConquerError> {
        if caption.trim().is_empty() {
            return Ok(BTreeSet::new());
        }
        let req = self
            .request(self.prompts.extraction_user_prompt(caption))
            .with_system(self.prompts.extraction_system.clone());
        let reply = self.backend.chat(&req)?.text;
        parse_object_list(&reply).ok_or(ConquerError::Unparseable(reply))
    }
}

/// Parses `{"object_list": [...]}` (or a bare `[]`) into normalized names.
///
/// If the reply is not valid JSON as a whole, the text between the first `{`
/// and the last `}` is tried once more.
pub fn parse_object_list(reply: &str) -> Option<BTreeSet<String>> {
    let trimmed = reply.trim();
    let value = serde_json::from_str::<Value>(trimmed).ok().or_else(|| {
        let start = trimmed.find('{')?;
        let end = trimmed.rfind('}')?;
        (start < end).then(|| serde_json::from_str::<Value>(&trimmed[start..=end]).ok()).flatten()
    })?;
    let list = match &value {
        Value::Object(map) => map.get("object_list")?.as_array()?,
        Value::Array(items) if items.is_empty() => items,
        _ => return None,
    };
    let mut names = BTreeSet::new();
    for item in list {
        // empty names are dropped, non-strings reject the whole reply
        if let Ok(name) = normalize_name(item.as_str()?) {
            names.insert(name);
        }
    }
    Some(names)
}
