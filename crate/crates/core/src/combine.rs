//! Combine stage: hallucination filtering and the visual memory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::divide::PatchNode;
use crate::geometry::{iou, nms, Region, ScoredRegion, DEFAULT_NMS_THRESHOLD};

#[derive(Debug, Error)]
pub enum CombineError {
    #[error("empty name")]
    EmptyName,
    #[error("region {region} for {name:?} lies outside the {width}x{height} root image")]
    OutOfBounds { name: String, region: Region, width: u32, height: u32 },
    #[error("NMS threshold must be within [0, 1] (got {0})")]
    InvalidThreshold(f64),
    #[error("memory file: {0}")]
    Io(#[from] std::io::Error),
    #[error("memory file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Lowercases, trims and collapses internal whitespace.
pub fn normalize_name(raw: &str) -> Result<String, CombineError> {
    let name = raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    if name.is_empty() {
        Err(CombineError::EmptyName)
    } else {
        Ok(name)
    }
}

/// Objects reported by a node that its children also reported.
pub fn filter_objects(parent: &BTreeSet<String>, children: &BTreeSet<String>) -> BTreeSet<String> {
    parent.intersection(children).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub name: String,
    #[serde(flatten)]
    pub region: Region,
    pub layer: u32,
}

#[derive(Serialize, Deserialize)]
struct MemoryFile {
    image_id: String,
    root_size: [u32; 2],
    records: Vec<ObjectRecord>,
}

/// Object name to patch coordinates, deduplicated per name with NMS.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualMemory {
    image_id: String,
    width: u32,
    height: u32,
    nms_threshold: f64,
    entries: BTreeMap<String, Vec<ScoredRegion>>,
    next_index: u64,
}

impl VisualMemory {
    pub fn new(image_id: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            image_id: image_id.into(),
            width,
            height,
            nms_threshold: DEFAULT_NMS_THRESHOLD,
            entries: BTreeMap::new(),
            next_index: 0,
        }
    }

    pub fn with_nms_threshold(mut self, threshold: f64) -> Result<Self, CombineError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(CombineError::InvalidThreshold(threshold));
        }
        self.nms_threshold = threshold;
        Ok(self)
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn root_size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn nms_threshold(&self) -> f64 {
        self.nms_threshold
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Stored regions for `name`, deepest layer first.
    pub fn regions(&self, name: &str) -> impl Iterator<Item = &ScoredRegion> {
        self.entries.get(name).into_iter().flatten()
    }

    /// All records, sorted by name and then suppression priority.
    pub fn records(&self) -> Vec<ObjectRecord> {
        self.entries
            .iter()
            .flat_map(|(name, regions)| {
                regions.iter().map(move |s| ObjectRecord { name: name.clone(), region: s.region, layer: s.layer })
            })
            .collect()
    }

    /// Adds one candidate per `(object, region)` pair and re-runs NMS for the
    /// affected names.
    pub fn store(&mut self, objects: &BTreeSet<String>, regions: &[Region], layer: u32) -> Result<(), CombineError> {
        for name in objects {
            let name = normalize_name(name)?;
            for region in regions {
                if !region.within_canvas(self.width, self.height) {
                    return Err(CombineError::OutOfBounds {
                        name,
                        region: *region,
                        width: self.width,
                        height: self.height,
                    });
                }
            }
            let list = self.entries.entry(name).or_default();
            for region in regions {
                list.push(ScoredRegion::new(*region, layer, self.next_index));
                self.next_index += 1;
            }
            *list = nms(list, self.nms_threshold);
        }
        Ok(())
    }

    /// Stores `objects` at every pre-merge coordinate of `node`.
    pub fn store_node(&mut self, objects: &BTreeSet<String>, node: &PatchNode) -> Result<(), CombineError> {
        self.store(objects, &node.patch.source_regions, node.layer)
    }

    /// True when no name holds two regions overlapping at or above the NMS
    /// threshold.
    pub fn satisfies_nms(&self) -> bool {
        self.entries.values().all(|regions| {
            regions
                .iter()
                .enumerate()
                .all(|(i, a)| regions[i + 1..].iter().all(|b| iou(&a.region, &b.region) < self.nms_threshold))
        })
    }

    pub fn to_json(&self) -> Result<String, CombineError> {
        let file = MemoryFile {
            image_id: self.image_id.clone(),
            root_size: [self.width, self.height],
            records: self.records(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Rebuilds a memory from its JSON form. Records are re-inserted in file
    /// order, so a saved memory loads back unchanged.
    pub fn from_json(json: &str) -> Result<Self, CombineError> {
        let file: MemoryFile = serde_json::from_str(json)?;
        let mut memory = Self::new(file.image_id, file.root_size[0], file.root_size[1]);
        for rec in file.records {
            let set = BTreeSet::from([rec.name]);
            memory.store(&set, &[rec.region], rec.layer)?;
        }
        Ok(memory)
    }

    pub fn save(&self, path: &Path) -> Result<(), CombineError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CombineError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
