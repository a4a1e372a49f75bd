//! Integer rectangle arithmetic shared by every pipeline stage.
//!
//! Regions are expressed in root-image pixel coordinates as `(x, y, w, h)`
//! with the origin at the top-left corner.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    #[error("unsplittable region {0}: both sides must be at least 2 pixels")]
    Unsplittable(Region),
    #[error("degenerate region: width and height must be at least 1 (got {w}x{h})")]
    Degenerate { w: u32, h: u32 },
}

/// Axis-aligned rectangle in root-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Region {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Region {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Result<Self, GeometryError> {
        if w == 0 || h == 0 {
            return Err(GeometryError::Degenerate { w, h });
        }
        Ok(Self { x, y, w, h })
    }

    /// Full-canvas region for an image of the given size.
    pub fn root(width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(0, 0, width, height)
    }

    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn intersection_area(&self, other: &Region) -> u64 {
        let left = self.x.max(other.x) as u64;
        let top = self.y.max(other.y) as u64;
        let right = self.right().min(other.right());
        let bottom = self.bottom().min(other.bottom());
        if right <= left || bottom <= top {
            0
        } else {
            (right - left) * (bottom - top)
        }
    }

    pub fn intersects(&self, other: &Region) -> bool {
        self.intersection_area(other) > 0
    }

    /// True when `self` lies entirely inside `outer`.
    pub fn within(&self, outer: &Region) -> bool {
        self.x >= outer.x && self.y >= outer.y && self.right() <= outer.right() && self.bottom() <= outer.bottom()
    }

    /// True when the region fits a canvas of the given size.
    pub fn within_canvas(&self, width: u32, height: u32) -> bool {
        self.right() <= width as u64 && self.bottom() <= height as u64
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.x, self.y, self.w, self.h)
    }
}

/// Quadrant position produced by [`split_region`], in output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quadrant {
    TopLeft = 0,
    TopRight = 1,
    BottomLeft = 2,
    BottomRight = 3,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::TopLeft, Quadrant::TopRight, Quadrant::BottomLeft, Quadrant::BottomRight];
}

/// Splits a region into four quadrants at the floor midpoint.
///
/// Right and bottom quadrants absorb the odd remainder. Output order is
/// top-left, top-right, bottom-left, bottom-right.
pub fn split_region(parent: Region) -> Result<[Region; 4], GeometryError> {
    if parent.w < 2 || parent.h < 2 {
        return Err(GeometryError::Unsplittable(parent));
    }
    let left_w = parent.w / 2;
    let top_h = parent.h / 2;
    let right_w = parent.w - left_w;
    let bottom_h = parent.h - top_h;
    let mid_x = parent.x + left_w;
    let mid_y = parent.y + top_h;
    Ok([
        Region { x: parent.x, y: parent.y, w: left_w, h: top_h },
        Region { x: mid_x, y: parent.y, w: right_w, h: top_h },
        Region { x: parent.x, y: mid_y, w: left_w, h: bottom_h },
        Region { x: mid_x, y: mid_y, w: right_w, h: bottom_h },
    ])
}

/// Intersection over union of two regions.
pub fn iou(a: &Region, b: &Region) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// A candidate box for suppression, tagged with the recursion layer it came
/// from and an insertion index used to break ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoredRegion {
    pub region: Region,
    pub layer: u32,
    pub tiebreak: u64,
}

impl ScoredRegion {
    pub fn new(region: Region, layer: u32, tiebreak: u64) -> Self {
        Self { region, layer, tiebreak }
    }

    /// Suppression priority: deeper layer first, then earlier insertion.
    pub fn priority_cmp(&self, other: &Self) -> Ordering {
        other.layer.cmp(&self.layer).then(self.tiebreak.cmp(&other.tiebreak)).then(self.region.cmp(&other.region))
    }
}

pub const DEFAULT_NMS_THRESHOLD: f64 = 0.5;

/// Greedy non-maximum suppression.
///
/// Candidates are visited in priority order (see
/// [`ScoredRegion::priority_cmp`]); a candidate is kept when its IoU with
/// every already-kept box is below `iou_threshold`. Output is in priority
/// order.
pub fn nms(candidates: &[ScoredRegion], iou_threshold: f64) -> Vec<ScoredRegion> {
    let mut ordered: Vec<ScoredRegion> = candidates.to_vec();
    ordered.sort_by(|a, b| a.priority_cmp(b));

    let mut kept: Vec<ScoredRegion> = Vec::with_capacity(ordered.len());
    for cand in ordered {
        if kept.iter().all(|k| iou(&k.region, &cand.region) < iou_threshold) {
            kept.push(cand);
        }
    }
    kept
}
