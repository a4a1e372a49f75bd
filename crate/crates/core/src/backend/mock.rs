//! Deterministic stand-in for a vision-language model.
//!
//! The mock "sees" an object when the received image contains pixels of that
//! object's signature colour. Signature colours are painted exactly, so an
//! object survives cropping at native resolution but vanishes once
//! downsampling or patch averaging blends it with its surroundings, just as
//! fine detail does for a real encoder. Replies depend only on the request.

use std::collections::HashMap;
use std::thread;
use std::time::Duration;

use image::Rgb;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse};
use crate::geometry::Region;
use crate::raster::{decode_image, Raster};

pub const EMPTY_REGION_CAPTION: &str = "An empty region.";
const NO_INFO: &str = "NONE";
const UNSURE: &str = "I cannot tell.";

/// Nouns the mock extractor recognises besides the scene objects.
const COMMON_NOUNS: &[&str] = &[
    "bench", "bicycle", "bird", "boat", "building", "bus", "car", "cat", "dog", "flag", "house", "lamp", "person",
    "road", "sign", "sky", "street", "tree", "truck", "window",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockObject {
    pub name: String,
    pub attribute: String,
    /// Signature colour painted over `region`; must be unique in a registry.
    pub color: [u8; 3],
    pub region: Region,
}

impl MockObject {
    fn phrase(&self) -> String {
        format!("{} {}", self.attribute, self.name).to_lowercase()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScene {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<MockObject>,
}

impl MockScene {
    pub fn validate(&self) -> Result<(), String> {
        for o in &self.objects {
            if !o.region.within_canvas(self.width, self.height) {
                return Err(format!(
                    "object {:?} at {} lies outside the {}x{} canvas",
                    o.name, o.region, self.width, self.height
                ));
            }
            if o.name.trim().is_empty() {
                return Err("object with empty name".into());
            }
        }
        Ok(())
    }

    /// Paints every object's signature colour onto `canvas`.
    pub fn paint(&self, canvas: &mut Raster) {
        for o in &self.objects {
            for y in o.region.y..(o.region.y + o.region.h).min(canvas.height()) {
                for x in o.region.x..(o.region.x + o.region.w).min(canvas.width()) {
                    canvas.put_pixel(x, y, Rgb(o.color));
                }
            }
        }
    }
}

pub struct MockBackend {
    objects: Vec<MockObject>,
    by_color: HashMap<[u8; 3], usize>,
    vocabulary: Vec<Vec<String>>,
    min_pixels: usize,
    latency: Duration,
}

impl MockBackend {
    pub fn new(scenes: &[MockScene]) -> Result<Self, BackendError> {
        let mut objects = Vec::new();
        let mut by_color = HashMap::new();
        for scene in scenes {
            scene.validate().map_err(BackendError::Config)?;
            for o in &scene.objects {
                if by_color.insert(o.color, objects.len()).is_some() {
                    return Err(BackendError::Config(format!("signature colour {:?} used twice", o.color)));
                }
                objects.push(o.clone());
            }
        }
        let mut vocabulary: Vec<Vec<String>> = COMMON_NOUNS.iter().map(|n| tokens(n)).collect();
        for o in &objects {
            let t = tokens(&o.name);
            if !vocabulary.contains(&t) {
                vocabulary.push(t);
            }
        }
        Ok(Self { objects, by_color, vocabulary, min_pixels: 1, latency: Duration::ZERO })
    }

    /// Minimum number of exact signature pixels for an object to count as
    /// visible (default 1, i.e. any overlap at native resolution).
    pub fn with_min_pixels(mut self, n: usize) -> Self {
        self.min_pixels = n.max(1);
        self
    }

    /// Simulated per-call latency.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    /// Objects visible in a raster, in registry order.
    pub fn detect(&self, raster: &Raster) -> Vec<&MockObject> {
        let mut counts = vec![0usize; self.objects.len()];
        for p in raster.pixels() {
            if let Some(&i) = self.by_color.get(&p.0) {
                counts[i] += 1;
            }
        }
        counts.iter().enumerate().filter(|(_, &c)| c >= self.min_pixels).map(|(i, _)| &self.objects[i]).collect()
    }

    fn detect_png(&self, png: Option<&[u8]>) -> Result<Vec<&MockObject>, BackendError> {
        match png {
            None => Ok(Vec::new()),
            Some(bytes) => {
                let raster =
                    decode_image(bytes).map_err(|e| BackendError::InvalidRequest(format!("undecodable image: {e}")))?;
                Ok(self.detect(&raster))
            }
        }
    }

    /// Registry objects whose "attribute name" phrase occurs in `text`.
    fn mentions(&self, text: &str) -> Vec<&MockObject> {
        let haystack = tokens(text);
        let mut seen: Vec<String> = Vec::new();
        let mut out = Vec::new();
        for o in &self.objects {
            let phrase = o.phrase();
            if !seen.contains(&phrase) && contains_seq(&haystack, &tokens(&phrase)) {
                seen.push(phrase);
                out.push(o);
            }
        }
        out
    }

    fn names_in<'a>(&'a self, text: &str) -> Vec<&'a str> {
        let haystack = tokens(text);
        let mut out: Vec<&str> = Vec::new();
        for o in &self.objects {
            if !out.contains(&o.name.as_str()) && contains_seq(&haystack, &tokens(&o.name)) {
                out.push(&o.name);
            }
        }
        out
    }

    fn reply(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let text = request.user_text.as_str();
        if request.system.is_some() && text.contains("Sentence: \"") {
            return Ok(self.extract(text));
        }
        if text.starts_with("Question: ") && text.contains("answer NONE") {
            let question = text["Question: ".len()..].lines().next().unwrap_or_default();
            let targets = self.names_in(question);
            let seen = self.detect_png(request.image_png.as_deref())?;
            let facts: Vec<String> = seen
                .iter()
                .filter(|o| targets.contains(&o.name.as_str()))
                .map(|o| format!("The {} {} is visible in this region.", o.attribute, o.name))
                .collect();
            return Ok(if facts.is_empty() { NO_INFO.to_string() } else { facts.join(" ") });
        }
        if let Some(idx) = text.find("Patch Captions:") {
            return Ok(caption_of(&self.mentions(&text[idx..])));
        }
        let options = option_lines(text);
        // captioning prompts are instructions; anything asking a question is answered
        if !options.is_empty() || request.image_png.is_none() || text.contains('?') {
            return self.answer(text, &options, request.image_png.as_deref());
        }
        Ok(caption_of(&self.detect_png(request.image_png.as_deref())?))
    }

    fn extract(&self, text: &str) -> String {
        let start = text.rfind("Sentence: \"").map(|i| i + "Sentence: \"".len()).unwrap_or(0);
        let end = text.rfind("\"\nOutput:").filter(|&e| e >= start).unwrap_or(text.len());
        let words = tokens(&text[start..end]);

        let mut hits: Vec<(usize, usize, String)> = Vec::new();
        for name in &self.vocabulary {
            if let Some(pos) = find_seq_plural(&words, name) {
                hits.push((pos, name.len(), name.join(" ")));
            }
        }
        // earliest first; at one position the longest name wins
        hits.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
        let mut covered_until = 0;
        let mut list = Vec::new();
        for (pos, len, name) in hits {
            if pos < covered_until || list.contains(&name) {
                continue;
            }
            covered_until = pos + len;
            list.push(name);
        }
        json!({ "object_list": list }).to_string()
    }

    fn answer(&self, text: &str, options: &[(char, String)], png: Option<&[u8]>) -> Result<String, BackendError> {
        let question: String = text.lines().take_while(|l| option_letter(l).is_none()).collect::<Vec<_>>().join(" ");
        let targets = self.names_in(&question);
        let mut facts = self.mentions(text);
        for o in self.detect_png(png)? {
            if !facts.iter().any(|f| f.phrase() == o.phrase()) {
                facts.push(o);
            }
        }
        for target in &targets {
            for fact in facts.iter().filter(|f| f.name == *target) {
                if options.is_empty() {
                    return Ok(format!("The {} is {}.", fact.name, fact.attribute));
                }
                let attr = fact.attribute.to_lowercase();
                if let Some((letter, _)) = options.iter().find(|(_, t)| t.to_lowercase() == attr) {
                    return Ok(format!("The answer is ({letter})."));
                }
            }
        }
        Ok(match options.first() {
            Some((letter, _)) => format!("The answer is ({letter})."),
            None => UNSURE.to_string(),
        })
    }
}

impl ChatBackend for MockBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        if !self.latency.is_zero() {
            thread::sleep(self.latency);
        }
        let text = self.reply(request)?;
        let token_logprobs = request.want_logprobs.then(|| vec![0.0; text.split_whitespace().count().max(1)]);
        Ok(ChatResponse { text, token_logprobs })
    }
}

fn caption_of(objects: &[&MockObject]) -> String {
    if objects.is_empty() {
        return EMPTY_REGION_CAPTION.to_string();
    }
    objects.iter().map(|o| format!("A {} {}.", o.attribute, o.name)).collect::<Vec<_>>().join(" ")
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

fn contains_seq(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// First position of `needle` in `words`, allowing a plural last word.
fn find_seq_plural(words: &[String], needle: &[String]) -> Option<usize> {
    let n = needle.len();
    if n == 0 || words.len() < n {
        return None;
    }
    (0..=words.len() - n).find(|&i| {
        words[i..i + n - 1] == needle[..n - 1] && {
            let (w, last) = (&words[i + n - 1], &needle[n - 1]);
            w == last || *w == format!("{last}s") || *w == format!("{last}es")
        }
    })
}

fn option_letter(line: &str) -> Option<char> {
    let mut chars = line.chars();
    let letter = chars.next()?;
    (letter.is_ascii_uppercase() && chars.next() == Some('.') && chars.next() == Some(' ')).then_some(letter)
}

fn option_lines(text: &str) -> Vec<(char, String)> {
    text.lines()
        .filter_map(|l| option_letter(l).map(|c| (c, l[3..].trim().trim_end_matches('.').to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::PromptSet;
    use crate::raster::encode_png;

    fn scene() -> MockScene {
        MockScene {
            image_id: "s".into(),
            width: 100,
            height: 100,
            objects: vec![
                MockObject {
                    name: "hydrant".into(),
                    attribute: "red".into(),
                    color: [255, 10, 10],
                    region: Region::new(10, 10, 5, 5).unwrap(),
                },
                MockObject {
                    name: "bench".into(),
                    attribute: "blue".into(),
                    color: [255, 20, 30],
                    region: Region::new(60, 60, 5, 5).unwrap(),
                },
            ],
        }
    }

    fn canvas() -> Raster {
        let mut c = Raster::from_pixel(100, 100, Rgb([90, 90, 90]));
        scene().paint(&mut c);
        c
    }

    fn mock() -> MockBackend {
        MockBackend::new(&[scene()]).unwrap()
    }

    fn caption(img: &Raster) -> String {
        let req = ChatRequest::new("m", PromptSet::default().leaf_prompt()).with_image(encode_png(img));
        mock().chat(&req).unwrap().text
    }

    #[test]
    fn captions_visible_objects() {
        let text = caption(&canvas());
        assert_eq!(text, "A red hydrant. A blue bench.");
    }

    #[test]
    fn empty_area_caption() {
        let crop = crate::raster::crop(&canvas(), &Region::new(30, 30, 20, 20).unwrap());
        assert_eq!(caption(&crop), EMPTY_REGION_CAPTION);
    }

    #[test]
    fn partial_overlap_is_seen() {
        let crop = crate::raster::crop(&canvas(), &Region::new(14, 14, 20, 20).unwrap());
        assert_eq!(caption(&crop), "A red hydrant.");
    }

    #[test]
    fn downsampling_hides_small_objects() {
        let small = crate::raster::downsample_to_fit(&canvas(), 12);
        assert_eq!(caption(&small), EMPTY_REGION_CAPTION);
    }

    #[test]
    fn extraction_reply_is_json() {
        let p = PromptSet::default();
        let req = ChatRequest::new("m", p.extraction_user_prompt("a red hydrant next to a bench"))
            .with_system(p.extraction_system.clone());
        let reply = mock().chat(&req).unwrap().text;
        assert_eq!(reply, r#"{"object_list":["hydrant","bench"]}"#);
    }

    #[test]
    fn extraction_handles_plurals_and_order() {
        let p = PromptSet::default();
        let req = ChatRequest::new("m", p.extraction_user_prompt("Two dogs chase cars past a tree"))
            .with_system(p.extraction_system.clone());
        assert_eq!(mock().chat(&req).unwrap().text, r#"{"object_list":["dog","car","tree"]}"#);
    }

    #[test]
    fn non_leaf_merges_child_mentions() {
        let p = PromptSet::default();
        let prompt = p.non_leaf_prompt(&["A red hydrant.".into(), "A blue bench. A red hydrant.".into()]);
        let req = ChatRequest::new("m", prompt).with_image(encode_png(&Raster::new(4, 4)));
        assert_eq!(mock().chat(&req).unwrap().text, "A red hydrant. A blue bench.");
    }

    #[test]
    fn describe_returns_none_without_target() {
        let p = PromptSet::default();
        let crop = crate::raster::crop(&canvas(), &Region::new(0, 0, 30, 30).unwrap());
        let ask = |q: &str| {
            let req = ChatRequest::new("m", p.inference_prompt(q)).with_image(encode_png(&crop));
            mock().chat(&req).unwrap().text
        };
        assert_eq!(ask("What color is the hydrant?"), "The red hydrant is visible in this region.");
        assert_eq!(ask("What color is the bench?"), "NONE");
    }

    #[test]
    fn answers_from_text_facts() {
        let text = "What color is the hydrant?\nA. blue\nB. red\nAnswer with the option's letter from the given choices directly.\n\nThe red hydrant is visible in this region.";
        let req = ChatRequest::new("m", text).with_image(encode_png(&Raster::new(8, 8)));
        assert_eq!(mock().chat(&req).unwrap().text, "The answer is (B).");
    }

    #[test]
    fn guesses_first_option_without_evidence() {
        let text = "What color is the hydrant?\nA. blue\nB. red";
        let req = ChatRequest::new("m", text).with_image(encode_png(&Raster::new(8, 8)));
        assert_eq!(mock().chat(&req).unwrap().text, "The answer is (A).");
    }

    #[test]
    fn logprobs_are_zero() {
        let req = ChatRequest::new("m", "hello").with_logprobs(true);
        let r = mock().chat(&req).unwrap();
        assert!(r.token_logprobs.unwrap().iter().all(|&l| l == 0.0));
    }

    #[test]
    fn duplicate_colours_rejected() {
        let mut s = scene();
        s.objects[1].color = s.objects[0].color;
        assert!(MockBackend::new(&[s]).is_err());
    }

    #[test]
    fn out_of_canvas_object_rejected() {
        let mut s = scene();
        s.objects[0].region = Region::new(98, 0, 5, 5).unwrap();
        assert!(MockBackend::new(&[s]).is_err());
    }
}
