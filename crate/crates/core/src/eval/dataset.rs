//! JSON Lines benchmark datasets.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Region;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "FSP:attribute")]
    Attribute,
    #[serde(rename = "FSP:ocr")]
    Ocr,
    #[serde(rename = "FSP:visual_prompting")]
    VisualPrompting,
    #[serde(rename = "FCP:map")]
    Map,
    #[serde(rename = "FCP:chart")]
    Chart,
    #[serde(rename = "FCP:spatial")]
    Spatial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "FSP")]
    Fsp,
    #[serde(rename = "FCP")]
    Fcp,
}

impl Category {
    pub fn split(self) -> Split {
        match self {
            Category::Attribute | Category::Ocr | Category::VisualPrompting => Split::Fsp,
            Category::Map | Category::Chart | Category::Spatial => Split::Fcp,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Attribute => "FSP:attribute",
            Category::Ocr => "FSP:ocr",
            Category::VisualPrompting => "FSP:visual_prompting",
            Category::Map => "FCP:map",
            Category::Chart => "FCP:chart",
            Category::Spatial => "FCP:spatial",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSample {
    pub id: String,
    /// Relative paths resolve against the dataset file's directory.
    pub image: PathBuf,
    pub question: String,
    pub options: Vec<String>,
    /// Gold letter, `A` for the first option.
    pub answer: String,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_objects: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_bbox: Option<Region>,
}

pub fn letter(index: usize) -> char {
    (b'A' + index as u8) as char
}

pub fn letter_index(letter: &str) -> Option<usize> {
    let mut chars = letter.trim().chars();
    let c = chars.next()?.to_ascii_uppercase();
    (chars.next().is_none() && c.is_ascii_uppercase()).then(|| (c as u8 - b'A') as usize)
}

impl BenchmarkSample {
    pub fn gold_index(&self) -> Option<usize> {
        letter_index(&self.answer).filter(|&i| i < self.options.len())
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.options.len() < 2 || self.options.len() > 26 {
            return Err(format!("needs 2 to 26 options, has {}", self.options.len()));
        }
        let distinct: BTreeSet<&str> = self.options.iter().map(|o| o.trim()).collect();
        if distinct.len() != self.options.len() {
            return Err("options are not distinct".into());
        }
        if self.gold_index().is_none() {
            return Err(format!("answer {:?} is not one of the {} option letters", self.answer, self.options.len()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("reading dataset {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("dataset {0} has no samples")]
    Empty(PathBuf),
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
}

/// One dataset line: a valid sample, or the reason it was rejected.
#[derive(Debug, Clone)]
pub enum DatasetEntry {
    Sample(BenchmarkSample),
    Invalid { line: usize, id: Option<String>, reason: String },
}

impl DatasetEntry {
    /// Sample id, or `line-N` for lines without a readable id.
    pub fn id(&self) -> String {
        match self {
            DatasetEntry::Sample(s) => s.id.clone(),
            DatasetEntry::Invalid { line, id, .. } => id.clone().unwrap_or_else(|| format!("line-{line}")),
        }
    }
}

/// Parses a JSON Lines dataset. Malformed lines become
/// [`DatasetEntry::Invalid`] so a run can score them as failures.
pub fn parse_dataset(text: &str, base_dir: &Path) -> Result<Vec<DatasetEntry>, DatasetError> {
    let mut entries = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let entry = match serde_json::from_str::<BenchmarkSample>(raw) {
            Ok(mut s) => match s.validate() {
                Ok(()) => {
                    if s.image.is_relative() {
                        s.image = base_dir.join(&s.image);
                    }
                    DatasetEntry::Sample(s)
                }
                Err(reason) => DatasetEntry::Invalid { line, id: Some(s.id), reason },
            },
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(raw)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|id| id.as_str()).map(String::from));
                DatasetEntry::Invalid { line, id, reason: e.to_string() }
            }
        };
        if !ids.insert(entry.id()) {
            return Err(DatasetError::DuplicateId(entry.id()));
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetEntry>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.into(), source })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let entries = parse_dataset(&text, base)?;
    if entries.is_empty() {
        return Err(DatasetError::Empty(path.into()));
    }
    Ok(entries)
}

/// Writes samples as JSON Lines.
pub fn to_jsonl(samples: &[BenchmarkSample]) -> String {
    samples.iter().map(|s| serde_json::to_string(s).expect("sample serializes") + "\n").collect()
}
