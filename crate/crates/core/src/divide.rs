//! Divide stage: recursive quadrant splitting with similarity-based merging
//! of sibling patches.
//!
//! Every node of the resulting tree carries its raster plus the root-image
//! coordinates of all the patches that were averaged into it, so later stages
//! can store pre-merge coordinates in the visual memory.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{split_region, GeometryError, Region};
use crate::raster::{crop, resize_bilinear, Raster};

/// Side length of the square thumbnail used as the default patch feature.
pub const THUMBNAIL_SIDE: u32 = 32;
pub const DEFAULT_PATCH_SIZE: u32 = 336;
pub const DEFAULT_THETA: f64 = 0.1;
pub const DEFAULT_MAX_DEPTH: u32 = 4;

#[derive(Debug, Error)]
pub enum DivideError {
    #[error("image is empty")]
    EmptyImage,
    #[error("patch size must be at least 1")]
    ZeroPatchSize,
    #[error("theta must be a finite non-negative number (got {0})")]
    InvalidTheta(f64),
    #[error("feature vectors have mismatched lengths ({0} vs {1})")]
    FeatureLength(usize, usize),
    #[error("clustering needs at least one feature vector")]
    NoFeatures,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A raster together with the root coordinates it was cut from.
///
/// Unmerged patches have exactly one source region whose size matches the
/// raster; merged patches keep every member's coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchImage {
    pub pixels: Raster,
    pub source_regions: Vec<Region>,
}

impl PatchImage {
    pub fn new(pixels: Raster, source_regions: Vec<Region>) -> Self {
        assert!(!source_regions.is_empty(), "a patch needs at least one source region");
        Self { pixels, source_regions }
    }

    /// Wraps a whole image as the root patch.
    pub fn root(pixels: Raster) -> Result<Self, DivideError> {
        let region = Region::root(pixels.width(), pixels.height()).map_err(|_| DivideError::EmptyImage)?;
        Ok(Self { pixels, source_regions: vec![region] })
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn is_merged(&self) -> bool {
        self.source_regions.len() > 1
    }
}

/// Node of the recursive division tree.
#[derive(Debug, Clone)]
pub struct PatchNode {
    pub patch: PatchImage,
    pub layer: u32,
    pub children: Vec<PatchNode>,
    pub caption: Option<String>,
    pub objects: Option<BTreeSet<String>>,
}

impl PatchNode {
    fn leaf(patch: PatchImage, layer: u32) -> Self {
        Self { patch, layer, children: Vec::new(), caption: None, objects: None }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(PatchNode::node_count).sum::<usize>()
    }

    /// Number of layers below this node (a lone leaf has depth 0).
    pub fn depth(&self) -> u32 {
        self.children.iter().map(|c| 1 + c.depth()).max().unwrap_or(0)
    }

    /// Pre-order traversal.
    pub fn iter(&self) -> impl Iterator<Item = &PatchNode> {
        let mut stack = vec![self];
        std::iter::from_fn(move || {
            let node = stack.pop()?;
            stack.extend(node.children.iter().rev());
            Some(node)
        })
    }

    pub fn leaves(&self) -> impl Iterator<Item = &PatchNode> {
        self.iter().filter(|n| n.is_leaf())
    }
}

/// Partition of the sibling indices into flat clusters.
///
/// Members inside a cluster are ascending; clusters are ordered by their
/// smallest member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub clusters: Vec<Vec<usize>>,
}

impl ClusterAssignment {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }
}

/// Maps a patch to the vector space used for sibling similarity.
pub trait FeatureExtractor: Send + Sync {
    fn extract(&self, patch: &PatchImage) -> Vec<f64>;
}

/// Default extractor: a 32x32 bilinear thumbnail, channels scaled to [0, 1],
/// flattened row-major as `(y, x, channel)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ThumbnailFeatures;

impl FeatureExtractor for ThumbnailFeatures {
    fn extract(&self, patch: &PatchImage) -> Vec<f64> {
        patch_feature(patch)
    }
}

pub fn patch_feature(patch: &PatchImage) -> Vec<f64> {
    let thumb = resize_bilinear(&patch.pixels, THUMBNAIL_SIDE, THUMBNAIL_SIDE);
    thumb.as_raw().iter().map(|&v| v as f64 / 255.0).collect()
}

/// Cosine distance `1 - cos(u, v)` in `[0, 2]`.
///
/// Only bitwise-identical vectors are at distance exactly 0, so a threshold of
/// zero merges nothing but identical features. A zero vector is at distance 1
/// from any nonzero vector.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    if u == v {
        return 0.0;
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return 1.0;
    }
    let cos = dot / (nu.sqrt() * nv.sqrt());
    (1.0 - cos).clamp(f64::EPSILON, 2.0)
}

/// Agglomerative clustering with average linkage over cosine distance.
///
/// Clusters keep merging while the closest pair's mean pairwise distance is at
/// most `theta`. Ties go to the pair whose smallest members come first.
pub fn cluster_patches(features: &[Vec<f64>], theta: f64) -> Result<ClusterAssignment, DivideError> {
    if !(theta.is_finite() && theta >= 0.0) {
        return Err(DivideError::InvalidTheta(theta));
    }
    let first = features.first().ok_or(DivideError::NoFeatures)?;
    if let Some(bad) = features.iter().find(|f| f.len() != first.len()) {
        return Err(DivideError::FeatureLength(first.len(), bad.len()));
    }

    let n = features.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = cosine_distance(&features[i], &features[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }

    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let d = average_linkage(&dist, &clusters[a], &clusters[b]);
                // clusters stay sorted by smallest member, so the first pair
                // found at a given distance is the tie winner
                if best.map_or(true, |(bd, _, _)| d < bd) {
                    best = Some((d, a, b));
                }
            }
        }
        match best {
            Some((d, a, b)) if d <= theta => {
                let absorbed = clusters.remove(b);
                clusters[a].extend(absorbed);
                clusters[a].sort_unstable();
            }
            _ => break,
        }
    }
    clusters.sort_by_key(|c| c[0]);
    Ok(ClusterAssignment { clusters })
}

fn average_linkage(dist: &[Vec<f64>], a: &[usize], b: &[usize]) -> f64 {
    let mut sum = 0.0;
    for &i in a {
        for &j in b {
            sum += dist[i][j];
        }
    }
    sum / (a.len() * b.len()) as f64
}

/// Averages a cluster of patches into one.
///
/// Members are resized to the first member's size before the per-pixel mean,
/// which rounds half up. Source regions are concatenated in member order.
pub fn merge_cluster(members: &[PatchImage]) -> PatchImage {
    assert!(!members.is_empty(), "cannot merge an empty cluster");
    if members.len() == 1 {
        return members[0].clone();
    }
    let (w, h) = members[0].pixels.dimensions();
    let n = members.len() as u32;
    let mut sums = vec![0u32; (w * h * 3) as usize];
    for m in members {
        let resized;
        let px = if m.pixels.dimensions() == (w, h) {
            &m.pixels
        } else {
            resized = resize_bilinear(&m.pixels, w, h);
            &resized
        };
        for (acc, &v) in sums.iter_mut().zip(px.as_raw()) {
            *acc += v as u32;
        }
    }
    let raw: Vec<u8> = sums.into_iter().map(|s| ((2 * s + n) / (2 * n)) as u8).collect();
    let pixels = Raster::from_raw(w, h, raw).expect("buffer sized from dimensions");
    let source_regions = members.iter().flat_map(|m| m.source_regions.iter().copied()).collect();
    PatchImage { pixels, source_regions }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivideParams {
    /// Encoder input resolution; patches at or below it on either side are
    /// leaves.
    pub patch_size: u32,
    pub theta: f64,
    pub max_depth: u32,
}

impl Default for DivideParams {
    fn default() -> Self {
        Self { patch_size: DEFAULT_PATCH_SIZE, theta: DEFAULT_THETA, max_depth: DEFAULT_MAX_DEPTH }
    }
}

/// Builds the division tree with the default thumbnail features.
pub fn build_patch_tree(image: PatchImage, params: &DivideParams) -> Result<PatchNode, DivideError> {
    build_patch_tree_with(image, params, &ThumbnailFeatures)
}

pub fn build_patch_tree_with(
    image: PatchImage,
    params: &DivideParams,
    extractor: &dyn FeatureExtractor,
) -> Result<PatchNode, DivideError> {
    if image.width() == 0 || image.height() == 0 {
        return Err(DivideError::EmptyImage);
    }
    if params.patch_size == 0 {
        return Err(DivideError::ZeroPatchSize);
    }
    if !(params.theta.is_finite() && params.theta >= 0.0) {
        return Err(DivideError::InvalidTheta(params.theta));
    }
    build_node(image, 0, params, extractor)
}

fn build_node(
    patch: PatchImage,
    layer: u32,
    params: &DivideParams,
    extractor: &dyn FeatureExtractor,
) -> Result<PatchNode, DivideError> {
    let is_leaf =
        patch.width() <= params.patch_size || patch.height() <= params.patch_size || layer >= params.max_depth;
    if is_leaf {
        return Ok(PatchNode::leaf(patch, layer));
    }

    let quadrants = split_patch(&patch)?;
    let features: Vec<Vec<f64>> = quadrants.iter().map(|q| extractor.extract(q)).collect();
    let assignment = cluster_patches(&features, params.theta)?;

    let merged: Vec<PatchImage> = assignment
        .clusters
        .iter()
        .map(|members| {
            let group: Vec<PatchImage> = members.iter().map(|&i| quadrants[i].clone()).collect();
            merge_cluster(&group)
        })
        .collect();

    let children = merged
        .into_par_iter()
        .map(|child| build_node(child, layer + 1, params, extractor))
        .collect::<Result<Vec<_>, _>>()?;

    Ok(PatchNode { patch, layer, children, caption: None, objects: None })
}

/// Cuts a patch into its four quadrants.
///
/// Each source region is split with the same quadrant rule, so quadrant `q`
/// of a merged patch maps to quadrant `q` of every member's coordinates.
fn split_patch(patch: &PatchImage) -> Result<[PatchImage; 4], DivideError> {
    let local = split_region(Region::root(patch.width(), patch.height())?)?;
    let mut regions: [Vec<Region>; 4] = Default::default();
    for src in &patch.source_regions {
        match split_region(*src) {
            Ok(parts) => {
                for (q, part) in parts.into_iter().enumerate() {
                    regions[q].push(part);
                }
            }
            // a 1-pixel-thin member of a merged patch cannot be split; every
            // quadrant keeps the whole member
            Err(GeometryError::Unsplittable(_)) => {
                for r in regions.iter_mut() {
                    r.push(*src);
                }
            }
            Err(e) => return Err(e.into()),
        }
    }
    let mut regions = regions.into_iter();
    Ok(local.map(|area| PatchImage {
        pixels: crop(&patch.pixels, &area),
        source_regions: regions.next().expect("four quadrants"),
    }))
}
