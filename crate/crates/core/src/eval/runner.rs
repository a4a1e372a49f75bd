//! Question answerers compared by the harness, and per-sample scoring.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::dataset::{letter, BenchmarkSample};
use super::metrics::{cyclic_permutations, parse_choice, rotated_position, uncertainty};
use crate::backend::SharedBackend;
use crate::combine::VisualMemory;
use crate::inference::{Pipeline, RetrievalHit};
use crate::raster::Raster;

pub const ANSWER_INSTRUCTION: &str = "Answer with the option's letter from the given choices directly.";

/// One multiple-choice presentation of a question.
#[derive(Debug, Clone, PartialEq)]
pub struct McPrompt {
    pub question: String,
    pub options: Vec<String>,
}

impl McPrompt {
    /// Question, lettered options, then the answer instruction.
    pub fn render(&self) -> String {
        let mut text = self.question.trim_end().to_string();
        for (i, option) in self.options.iter().enumerate() {
            text.push_str(&format!("\n{}. {}", letter(i), option));
        }
        text.push('\n');
        text.push_str(ANSWER_INSTRUCTION);
        text
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunnerReply {
    pub text: String,
    pub token_logprobs: Option<Vec<f64>>,
    /// Retrieved memory entries, for runners that retrieve.
    pub hits: Option<Vec<RetrievalHit>>,
}

pub type RunnerError = String;

/// Answers one multiple-choice prompt about a sample.
pub trait Runner: Send + Sync {
    fn name(&self) -> &str;

    /// Whether the sample image must be loaded.
    fn needs_image(&self) -> bool {
        true
    }

    fn answer(
        &self,
        sample: &BenchmarkSample,
        image: Option<&Raster>,
        prompt: &McPrompt,
    ) -> Result<RunnerReply, RunnerError>;

    /// Called once a sample's rotations are done; per-sample state may be
    /// dropped.
    fn finish(&self, _sample_id: &str) {}
}

/// The full pipeline. The visual memory is built once per sample and reused
/// across rotations.
pub struct Dc2Runner {
    pipeline: Pipeline,
    memories: Mutex<HashMap<String, Arc<VisualMemory>>>,
}

impl Dc2Runner {
    pub fn new(pipeline: Pipeline) -> Self {
        Self { pipeline, memories: Mutex::new(HashMap::new()) }
    }

    fn memory(&self, sample: &BenchmarkSample, image: &Raster) -> Result<Arc<VisualMemory>, RunnerError> {
        if let Some(m) = self.memories.lock().expect("memory map").get(&sample.id) {
            return Ok(m.clone());
        }
        let (_, memory) = self.pipeline.build_memory(&sample.id, image).map_err(|e| e.to_string())?;
        let memory = Arc::new(memory);
        self.memories.lock().expect("memory map").insert(sample.id.clone(), memory.clone());
        Ok(memory)
    }
}

impl Runner for Dc2Runner {
    fn name(&self) -> &str {
        "dc2"
    }

    fn answer(
        &self,
        sample: &BenchmarkSample,
        image: Option<&Raster>,
        prompt: &McPrompt,
    ) -> Result<RunnerReply, RunnerError> {
        let image = image.ok_or("dc2 runner needs the image")?;
        let memory = self.memory(sample, image)?;
        let out = self
            .pipeline
            .answer_with_memory(memory, image, &prompt.question, &prompt.render(), true)
            .map_err(|e| e.to_string())?;
        Ok(RunnerReply { text: out.response.text, token_logprobs: out.response.token_logprobs, hits: Some(out.hits) })
    }

    fn finish(&self, sample_id: &str) {
        self.memories.lock().expect("memory map").remove(sample_id);
    }
}

/// A single model call with the same prompt as the final pipeline call.
pub struct PlainRunner {
    name: &'static str,
    pipeline: Pipeline,
    with_image: bool,
}

impl PlainRunner {
    /// The whole image, downsampled to the encoder size.
    pub fn baseline(pipeline: Pipeline) -> Self {
        Self { name: "baseline", pipeline, with_image: true }
    }

    /// The identical prompt with no image attached.
    pub fn no_image(pipeline: Pipeline) -> Self {
        Self { name: "no-image", pipeline, with_image: false }
    }

    /// No image, sent to the text-only base model behind `pipeline`.
    pub fn text_only(pipeline: Pipeline) -> Self {
        Self { name: "text-only", pipeline, with_image: false }
    }
}

impl Runner for PlainRunner {
    fn name(&self) -> &str {
        self.name
    }

    fn needs_image(&self) -> bool {
        self.with_image
    }

    fn answer(
        &self,
        _: &BenchmarkSample,
        image: Option<&Raster>,
        prompt: &McPrompt,
    ) -> Result<RunnerReply, RunnerError> {
        let image = if self.with_image { Some(image.ok_or("runner needs the image")?) } else { None };
        let req = self.pipeline.answer_request(image, &prompt.render(), "", true);
        let resp = self.backend().chat(&req).map_err(|e| e.to_string())?;
        Ok(RunnerReply { text: resp.text, token_logprobs: resp.token_logprobs, hits: None })
    }
}

impl PlainRunner {
    fn backend(&self) -> &SharedBackend {
        self.pipeline.backend()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationRecord {
    pub rotation: usize,
    pub gold: char,
    pub predicted: Option<char>,
    pub correct: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub accuracy: f64,
    pub rotations: Vec<RotationRecord>,
    /// Hits from the first rotation, when the runner retrieves.
    pub hits: Option<Vec<RetrievalHit>>,
}

impl SampleOutcome {
    pub fn mean_uncertainty(&self) -> Option<f64> {
        let values: Vec<f64> = self.rotations.iter().filter_map(|r| r.uncertainty).collect();
        super::metrics::mean(&values)
    }
}

/// Cyclic accuracy: the sample is asked once per rotation of its options and
/// the 0/1 scores are averaged. A failed rotation scores 0.
pub fn sample_accuracy(sample: &BenchmarkSample, image: Option<&Raster>, runner: &dyn Runner) -> SampleOutcome {
    let n = sample.options.len();
    let gold = sample.gold_index().expect("validated sample");
    let rotations = cyclic_permutations(&sample.options).expect("validated sample");
    let mut records = Vec::with_capacity(n);
    let mut hits = None;
    for (r, options) in rotations.into_iter().enumerate() {
        let gold_letter = letter(rotated_position(gold, r, n));
        let prompt = McPrompt { question: sample.question.clone(), options };
        let record = match runner.answer(sample, image, &prompt) {
            Ok(reply) => {
                let predicted = parse_choice(&reply.text, &prompt.options);
                if r == 0 {
                    hits = reply.hits;
                }
                RotationRecord {
                    rotation: r,
                    gold: gold_letter,
                    predicted,
                    correct: predicted == Some(gold_letter),
                    error: None,
                    uncertainty: reply.token_logprobs.as_deref().and_then(uncertainty),
                }
            }
            Err(e) => {
                warn!(sample = %sample.id, rotation = r, error = %e, "rotation failed");
                RotationRecord {
                    rotation: r,
                    gold: gold_letter,
                    predicted: None,
                    correct: false,
                    error: Some(e),
                    uncertainty: None,
                }
            }
        };
        records.push(record);
    }
    runner.finish(&sample.id);
    let correct = records.iter().filter(|r| r.correct).count();
    SampleOutcome { accuracy: correct as f64 / n as f64, rotations: records, hits }
}
