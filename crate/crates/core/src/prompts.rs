//! Prompt templates for captioning, object extraction and retrieval-time
//! descriptions.
//!
//! The default texts live in `prompts/*.txt` next to the crate and are
//! compiled in. A directory with files of the same names overrides them one by
//! one.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Version tag of the bundled templates.
pub const PROMPT_VERSION: &str = "1";

const LEAF_PRESETS: [&str; 5] = [
    include_str!("../prompts/leaf.txt"),
    include_str!("../prompts/leaf_preset_2.txt"),
    include_str!("../prompts/leaf_preset_3.txt"),
    include_str!("../prompts/leaf_preset_4.txt"),
    include_str!("../prompts/leaf_preset_5.txt"),
];
const NON_LEAF: &str = include_str!("../prompts/non_leaf.txt");
const EXTRACTION_SYSTEM: &str = include_str!("../prompts/extraction_system.txt");
const EXTRACTION_USER: &str = include_str!("../prompts/extraction_user.txt");
const INFERENCE: &str = include_str!("../prompts/inference.txt");

const CAPTIONS_SLOT: &str = "{captions}";
const CAPTION_SLOT: &str = "{caption}";
const QUESTION_SLOT: &str = "{question}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub leaf: String,
    pub non_leaf: String,
    pub extraction_system: String,
    pub extraction_user: String,
    pub inference: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            leaf: LEAF_PRESETS[0].to_string(),
            non_leaf: NON_LEAF.to_string(),
            extraction_system: EXTRACTION_SYSTEM.to_string(),
            extraction_user: EXTRACTION_USER.to_string(),
            inference: INFERENCE.to_string(),
        }
    }
}

impl PromptSet {
    /// Default set with one of the five bundled leaf captioning prompts
    /// (1-based; preset 1 is the default).
    pub fn with_leaf_preset(preset: usize) -> Option<Self> {
        let leaf = LEAF_PRESETS.get(preset.checked_sub(1)?)?;
        Some(Self { leaf: leaf.to_string(), ..Self::default() })
    }

    pub fn leaf_preset_count() -> usize {
        LEAF_PRESETS.len()
    }

    /// Replaces templates with any of `leaf.txt`, `non_leaf.txt`,
    /// `extraction_system.txt`, `extraction_user.txt`, `inference.txt` found in
    /// `dir`.
    pub fn override_from_dir(mut self, dir: &Path) -> io::Result<Self> {
        let slots: [(&str, &mut String); 5] = [
            ("leaf.txt", &mut self.leaf),
            ("non_leaf.txt", &mut self.non_leaf),
            ("extraction_system.txt", &mut self.extraction_system),
            ("extraction_user.txt", &mut self.extraction_user),
            ("inference.txt", &mut self.inference),
        ];
        for (name, slot) in slots {
            let path = dir.join(name);
            if path.exists() {
                *slot = fs::read_to_string(&path)?.trim_end_matches('\n').to_string();
            }
        }
        Ok(self)
    }

    pub fn leaf_prompt(&self) -> &str {
        &self.leaf
    }

    /// Non-leaf prompt with child captions as `1. ...` lines in child order.
    pub fn non_leaf_prompt(&self, child_captions: &[String]) -> String {
        let mut block = String::new();
        for (i, caption) in child_captions.iter().enumerate() {
            block.push('\n');
            block.push_str(&format!("{}. {}", i + 1, single_line(caption)));
        }
        self.non_leaf.replacen(CAPTIONS_SLOT, &block, 1)
    }

    pub fn extraction_user_prompt(&self, caption: &str) -> String {
        self.extraction_user.replacen(CAPTION_SLOT, &single_line(caption), 1)
    }

    pub fn inference_prompt(&self, question: &str) -> String {
        self.inference.replacen(QUESTION_SLOT, question.trim(), 1)
    }
}

fn single_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}
