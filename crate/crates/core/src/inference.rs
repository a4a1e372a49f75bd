//! Inference stage and the end-to-end pipeline.
//!
//! The visual memory is built bottom-up over the patch tree: leaves are
//! captioned directly, inner nodes are captioned from their children's
//! captions, and an inner node keeps only objects its children also saw. At
//! question time, memory entries that match the question are cropped from the
//! full image and described, and those descriptions are appended to the
//! question for the final call.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::backend::{BackendError, ChatRequest, ChatResponse, SharedBackend};
use crate::combine::{filter_objects, CombineError, VisualMemory};
use crate::conquer::{encode_for_model, Conquer, ConquerError, ModelSettings};
use crate::divide::{
    build_patch_tree_with, DivideError, DivideParams, FeatureExtractor, PatchImage, PatchNode, ThumbnailFeatures,
};
use crate::geometry::{Region, DEFAULT_NMS_THRESHOLD};
use crate::prompts::PromptSet;
use crate::raster::{crop, Raster};

pub const DEFAULT_ALPHA: f64 = 0.3;
pub const DEFAULT_TOP_K: usize = 3;
/// Joins the question and the auxiliary descriptions in the final prompt.
pub const AUX_SEPARATOR: &str = "\n";

/// Relevance of a stored object name to a query, in `[0, 1]`.
pub trait Scorer: Send + Sync {
    fn score(&self, query: &str, name: &str) -> f64;
}

/// Cosine similarity of character-trigram count vectors.
///
/// Both strings are lowercased, non-alphanumerics become spaces, whitespace
/// runs collapse, and one space pads each end so word boundaries form
/// trigrams of their own.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrigramScorer;

impl TrigramScorer {
    fn prepare(text: &str) -> String {
        let cleaned: String = text
            .chars()
            .map(|c| if c.is_alphanumeric() { c.to_lowercase().next().unwrap_or(c) } else { ' ' })
            .collect();
        format!(" {} ", cleaned.split_whitespace().collect::<Vec<_>>().join(" "))
    }

    fn trigrams(prepared: &str) -> HashMap<[char; 3], u32> {
        let chars: Vec<char> = prepared.chars().collect();
        let mut counts = HashMap::new();
        for w in chars.windows(3) {
            *counts.entry([w[0], w[1], w[2]]).or_insert(0) += 1;
        }
        counts
    }
}

impl Scorer for TrigramScorer {
    fn score(&self, query: &str, name: &str) -> f64 {
        let (q, n) = (Self::prepare(query), Self::prepare(name));
        if q.trim().is_empty() || n.trim().is_empty() {
            return 0.0;
        }
        if q == n {
            return 1.0;
        }
        let (qa, na) = (Self::trigrams(&q), Self::trigrams(&n));
        let dot: f64 = na.iter().map(|(t, &c)| c as f64 * *qa.get(t).unwrap_or(&0) as f64).sum();
        let norm = |m: &HashMap<[char; 3], u32>| m.values().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt();
        (dot / (norm(&qa) * norm(&na))).clamp(0.0, 1.0)
    }
}

pub fn score_query_object(query: &str, name: &str) -> f64 {
    TrigramScorer.score(query, name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub name: String,
    pub region: Region,
    pub layer: u32,
    pub score: f64,
}

/// Every stored `(name, region)` whose name scores at least `alpha`, sorted
/// by score (descending), then name, then layer (deepest first).
pub fn retrieve(memory: &VisualMemory, query: &str, alpha: f64, scorer: &dyn Scorer) -> Vec<RetrievalHit> {
    let mut hits: Vec<RetrievalHit> = memory
        .names()
        .filter_map(|name| {
            let score = scorer.score(query, name);
            (score >= alpha).then(|| (name, score))
        })
        .flat_map(|(name, score)| {
            memory.regions(name).map(move |s| RetrievalHit {
                name: name.to_string(),
                region: s.region,
                layer: s.layer,
                score,
            })
        })
        .collect();
    hits.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.name.cmp(&b.name))
            .then(b.layer.cmp(&a.layer))
            .then(a.region.cmp(&b.region))
    });
    hits
}

fn is_none_reply(text: &str) -> bool {
    text.trim().trim_end_matches('.').eq_ignore_ascii_case("none")
}

/// Final prompt text: the question, then the auxiliary descriptions when any.
pub fn compose_answer_text(question: &str, aux: &str) -> String {
    if aux.is_empty() {
        question.to_string()
    } else {
        format!("{question}{AUX_SEPARATOR}{aux}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Divide,
    Conquer,
    Combine,
    Describe,
    Answer,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Divide => "divide",
            Stage::Conquer => "conquer",
            Stage::Combine => "combine",
            Stage::Describe => "describe",
            Stage::Answer => "answer",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum StageFailure {
    #[error(transparent)]
    Divide(#[from] DivideError),
    #[error(transparent)]
    Conquer(#[from] ConquerError),
    #[error(transparent)]
    Combine(#[from] CombineError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// A pipeline failure, naming the stage and, where relevant, the patch node.
#[derive(Debug, Error)]
#[error("{stage} stage failed{}: {source}", node.as_ref().map(|n| format!(" at node {n}")).unwrap_or_default())]
pub struct PipelineError {
    pub stage: Stage,
    pub node: Option<String>,
    #[source]
    pub source: StageFailure,
}

impl PipelineError {
    fn new(stage: Stage, node: Option<&PatchNode>, source: impl Into<StageFailure>) -> Self {
        Self { stage, node: node.map(describe_node), source: source.into() }
    }

    pub fn is_backend_failure(&self) -> bool {
        matches!(self.source, StageFailure::Backend(_) | StageFailure::Conquer(ConquerError::Backend(_)))
    }
}

fn describe_node(node: &PatchNode) -> String {
    let first = node.patch.source_regions[0];
    format!("layer {} {}", node.layer, first)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub divide: DivideParams,
    pub alpha: f64,
    pub nms_threshold: f64,
    pub top_k: usize,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            divide: DivideParams::default(),
            alpha: DEFAULT_ALPHA,
            nms_threshold: DEFAULT_NMS_THRESHOLD,
            top_k: DEFAULT_TOP_K,
        }
    }
}

/// Everything produced while answering one question.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub response: ChatResponse,
    pub hits: Vec<RetrievalHit>,
    pub aux_text: String,
    pub memory: Arc<VisualMemory>,
}

struct NodeOutcome {
    caption: String,
    objects: BTreeSet<String>,
    stores: Vec<(BTreeSet<String>, Vec<Region>, u32)>,
}

#[derive(Clone)]
pub struct Pipeline {
    backend: SharedBackend,
    conquer: Conquer,
    settings: ModelSettings,
    params: PipelineParams,
    scorer: Arc<dyn Scorer>,
    extractor: Arc<dyn FeatureExtractor>,
    parallel: bool,
}

impl Pipeline {
    pub fn new(backend: SharedBackend, prompts: PromptSet, settings: ModelSettings, params: PipelineParams) -> Self {
        let conquer =
            Conquer::new(backend.clone(), prompts, settings.clone()).with_patch_size(params.divide.patch_size);
        Self {
            backend,
            conquer,
            settings,
            params,
            scorer: Arc::new(TrigramScorer),
            extractor: Arc::new(ThumbnailFeatures),
            parallel: true,
        }
    }

    pub fn with_scorer(mut self, scorer: Arc<dyn Scorer>) -> Self {
        self.scorer = scorer;
        self
    }

    pub fn with_feature_extractor(mut self, extractor: Arc<dyn FeatureExtractor>) -> Self {
        self.extractor = extractor;
        self
    }

    /// Issue sibling and description calls concurrently (default on). The
    /// results are identical either way.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn backend(&self) -> &SharedBackend {
        &self.backend
    }

    pub fn params(&self) -> &PipelineParams {
        &self.params
    }

    pub fn settings(&self) -> &ModelSettings {
        &self.settings
    }

    pub fn prompts(&self) -> &PromptSet {
        self.conquer.prompts()
    }

    /// Divide, conquer and combine: returns the captioned tree and its memory.
    pub fn build_memory(&self, image_id: &str, image: &Raster) -> Result<(PatchNode, VisualMemory), PipelineError> {
        let root = PatchImage::root(image.clone()).map_err(|e| PipelineError::new(Stage::Divide, None, e))?;
        let mut tree = build_patch_tree_with(root, &self.params.divide, self.extractor.as_ref())
            .map_err(|e| PipelineError::new(Stage::Divide, None, e))?;
        debug!(nodes = tree.node_count(), depth = tree.depth(), "patch tree built");

        let outcome = self.conquer_node(&mut tree)?;
        let mut memory = VisualMemory::new(image_id, image.width(), image.height())
            .with_nms_threshold(self.params.nms_threshold)
            .map_err(|e| PipelineError::new(Stage::Combine, None, e))?;
        for (objects, regions, layer) in &outcome.stores {
            memory.store(objects, regions, *layer).map_err(|e| PipelineError::new(Stage::Combine, None, e))?;
        }
        Ok((tree, memory))
    }

    fn conquer_node(&self, node: &mut PatchNode) -> Result<NodeOutcome, PipelineError> {
        let fail = |node: &PatchNode, e: ConquerError| PipelineError::new(Stage::Conquer, Some(node), e);

        if node.is_leaf() {
            let caption = self.conquer.caption_leaf(&node.patch).map_err(|e| fail(node, e))?;
            let objects = self.objects_of(node, &caption)?;
            node.caption = Some(caption.clone());
            node.objects = Some(objects.clone());
            // leaves have no children to corroborate against
            let stores = vec![(objects.clone(), node.patch.source_regions.clone(), node.layer)];
            return Ok(NodeOutcome { caption, objects, stores });
        }

        let children: Vec<NodeOutcome> = if self.parallel {
            node.children.par_iter_mut().map(|c| self.conquer_node(c)).collect::<Result<_, _>>()?
        } else {
            node.children.iter_mut().map(|c| self.conquer_node(c)).collect::<Result<_, _>>()?
        };

        let child_captions: Vec<String> = children.iter().map(|c| c.caption.clone()).collect();
        let child_objects: BTreeSet<String> = children.iter().flat_map(|c| c.objects.iter().cloned()).collect();
        let caption = self.conquer.caption_non_leaf(&node.patch, &child_captions).map_err(|e| fail(node, e))?;
        let objects = self.objects_of(node, &caption)?;
        let kept = filter_objects(&objects, &child_objects);

        let mut stores: Vec<_> = children.into_iter().flat_map(|c| c.stores).collect();
        stores.push((kept, node.patch.source_regions.clone(), node.layer));
        node.caption = Some(caption.clone());
        node.objects = Some(objects.clone());
        Ok(NodeOutcome { caption, objects, stores })
    }

    fn objects_of(&self, node: &PatchNode, caption: &str) -> Result<BTreeSet<String>, PipelineError> {
        match self.conquer.extract_objects(caption) {
            Ok(objects) => Ok(objects),
            Err(ConquerError::Unparseable(raw)) => {
                warn!(node = %describe_node(node), reply = %raw, "unparseable object list, treating as empty");
                Ok(BTreeSet::new())
            }
            Err(e) => Err(PipelineError::new(Stage::Conquer, Some(node), e)),
        }
    }

    pub fn retrieve(&self, memory: &VisualMemory, question: &str) -> Vec<RetrievalHit> {
        retrieve(memory, question, self.params.alpha, self.scorer.as_ref())
    }

    /// Describes the top-k hit regions; replies of "NONE" are dropped.
    pub fn describe_hits(
        &self,
        image: &Raster,
        question: &str,
        hits: &[RetrievalHit],
    ) -> Result<String, PipelineError> {
        let selected = &hits[..hits.len().min(self.params.top_k)];
        let prompt = self.conquer.prompts().inference_prompt(question);
        let describe = |hit: &RetrievalHit| -> Result<String, PipelineError> {
            let patch = crop(image, &hit.region);
            let req = ChatRequest::new(self.settings.model.clone(), prompt.clone())
                .with_temperature(self.settings.temperature)
                .with_image(encode_for_model(&patch, self.params.divide.patch_size));
            self.backend.chat(&req).map(|r| r.text).map_err(|e| PipelineError::new(Stage::Describe, None, e))
        };
        let replies: Vec<String> = if self.parallel {
            selected.par_iter().map(describe).collect::<Result<_, _>>()?
        } else {
            selected.iter().map(describe).collect::<Result<_, _>>()?
        };
        Ok(replies
            .into_iter()
            .filter(|r| !is_none_reply(r))
            .map(|r| r.trim().to_string())
            .collect::<Vec<_>>()
            .join("\n"))
    }

    /// The final request. With empty `aux` this is exactly the plain
    /// single-call baseline request.
    pub fn answer_request(&self, image: Option<&Raster>, question: &str, aux: &str, logprobs: bool) -> ChatRequest {
        let mut req = ChatRequest::new(self.settings.model.clone(), compose_answer_text(question, aux))
            .with_temperature(self.settings.temperature)
            .with_logprobs(logprobs);
        if let Some(img) = image {
            req = req.with_image(encode_for_model(img, self.params.divide.patch_size));
        }
        req
    }

    pub fn answer(
        &self,
        image: &Raster,
        question: &str,
        aux: &str,
        logprobs: bool,
    ) -> Result<ChatResponse, PipelineError> {
        let req = self.answer_request(Some(image), question, aux, logprobs);
        self.backend.chat(&req).map_err(|e| PipelineError::new(Stage::Answer, None, e))
    }

    /// Retrieval, descriptions and final answer over an existing memory.
    ///
    /// `describe_question` is what the patch descriptions are asked about
    /// (for multiple choice, the question without options); `answer_prompt`
    /// is the full final prompt.
    pub fn answer_with_memory(
        &self,
        memory: Arc<VisualMemory>,
        image: &Raster,
        describe_question: &str,
        answer_prompt: &str,
        logprobs: bool,
    ) -> Result<PipelineOutput, PipelineError> {
        let hits = self.retrieve(&memory, describe_question);
        let aux_text = self.describe_hits(image, describe_question, &hits)?;
        let response = self.answer(image, answer_prompt, &aux_text, logprobs)?;
        Ok(PipelineOutput { response, hits, aux_text, memory })
    }

    /// Full run for a free-form question.
    pub fn run(&self, image_id: &str, image: &Raster, question: &str) -> Result<PipelineOutput, PipelineError> {
        let (_, memory) = self.build_memory(image_id, image)?;
        self.answer_with_memory(Arc::new(memory), image, question, question, false)
    }
}
