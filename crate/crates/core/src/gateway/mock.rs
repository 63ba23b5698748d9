//! Offline backends driven by a [`MockWorld`]: a palette mapping object labels
//! to flat colors. Synthetic scenes paint each object in its color, so the
//! mocks can "see" which objects are present in any image, including images
//! produced by the mock inpainter.
//!
//! All mocks are pure functions of their inputs and seed.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use image::Rgb;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{image_hash, prompts, Embedder, GenerateRequest, Image, Inpainter, Segmenter, TextGenerator};
use crate::error::{Error, Result};
use crate::mask::{dilate, BitMask};
use crate::util::{derive_seed, replicate_rng};

pub const DEFAULT_EMBED_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockObject {
    pub label: String,
    pub color: [u8; 3],
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    /// Extra words the describer emits whenever this object is visible.
    #[serde(default)]
    pub context: Vec<String>,
}

fn default_confidence() -> f64 {
    0.9
}

impl MockObject {
    pub fn new(label: impl Into<String>, color: [u8; 3]) -> Self {
        Self { label: label.into(), color, confidence: default_confidence(), context: Vec::new() }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    pub fn with_context(mut self, words: &[&str]) -> Self {
        self.context = words.iter().map(|w| w.to_string()).collect();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockWorld {
    pub objects: Vec<MockObject>,
    /// Pixels of an object's color needed before it counts as visible.
    #[serde(default = "default_min_pixels")]
    pub min_pixels: usize,
    /// Per-object chance of going unmentioned in a sampled description, at temperature 1.
    #[serde(default = "default_omit")]
    pub omit_probability: f64,
    #[serde(default = "default_fillers")]
    pub fillers: Vec<String>,
}

fn default_min_pixels() -> usize {
    4
}

fn default_omit() -> f64 {
    0.05
}

fn default_fillers() -> Vec<String> {
    ["perhaps", "today", "quietly", "outdoors", "nearby", "apparently"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

impl MockWorld {
    pub fn new(objects: Vec<MockObject>) -> Self {
        Self {
            objects,
            min_pixels: default_min_pixels(),
            omit_probability: default_omit(),
            fillers: default_fillers(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(format!("{}:{}:{}", path.display(), e.line(), e.column()), e))
    }

    pub fn find(&self, label: &str) -> Option<&MockObject> {
        self.find_all(label).next()
    }

    /// Every entry with this label; one label may be painted in several colors.
    pub fn find_all<'a>(&'a self, label: &str) -> impl Iterator<Item = &'a MockObject> + 'a {
        let key = label.trim().to_lowercase();
        self.objects.iter().filter(move |o| o.label.to_lowercase() == key)
    }

    /// World objects whose color covers at least `min_pixels` pixels, in world order.
    pub fn visible(&self, image: &Image) -> Vec<&MockObject> {
        let mut counts: HashMap<[u8; 3], usize> = HashMap::new();
        for p in image.pixels() {
            *counts.entry(p.0).or_default() += 1;
        }
        self.objects
            .iter()
            .filter(|o| counts.get(&o.color).copied().unwrap_or(0) >= self.min_pixels)
            .collect()
    }
}

/// Text generator answering the three prompt kinds (object list, list merge,
/// scene description) from the visible palette objects.
pub struct MockDescriber {
    world: Arc<MockWorld>,
}

impl MockDescriber {
    pub fn new(world: Arc<MockWorld>) -> Self {
        Self { world }
    }

    fn describe_one(&self, visible: &[&MockObject], temperature: f64, rng: &mut impl Rng) -> String {
        let stochastic = temperature > 0.0;
        let omit = (self.world.omit_probability * temperature.min(1.0)).clamp(0.0, 1.0);
        let mut items = Vec::new();
        for o in visible {
            if stochastic && rng.random::<f64>() < omit {
                continue;
            }
            let mut item = o.label.clone();
            for w in &o.context {
                item.push(' ');
                item.push_str(w);
            }
            items.push(item);
        }
        let mut text = if items.is_empty() {
            "A scene with nothing in particular".to_string()
        } else {
            format!("A scene with {}", items.join(", "))
        };
        if stochastic && !self.world.fillers.is_empty() {
            for _ in 0..rng.random_range(0..=2) {
                let w = &self.world.fillers[rng.random_range(0..self.world.fillers.len())];
                text.push(' ');
                text.push_str(w);
            }
        }
        text.push('.');
        text
    }
}

fn merge_lists(lists: &[String]) -> String {
    let mut out: Vec<String> = Vec::new();
    let mut push = |label: &str| {
        let label = label.trim();
        if !label.is_empty() && !out.iter().any(|l| l.eq_ignore_ascii_case(label)) {
            out.push(label.to_string());
        }
    };
    for list in lists {
        let Some(items) = super::parse_object_list(list) else { continue };
        for item in items {
            push(&item);
            if let Some((_, tail)) = item.split_once(" with ") {
                push(tail);
            }
        }
    }
    if out.is_empty() {
        "None".into()
    } else {
        out.join(", ")
    }
}

impl TextGenerator for MockDescriber {
    fn generate(&self, req: &GenerateRequest<'_>) -> Result<Vec<String>> {
        if prompts::is_merge_prompt(req.prompt) {
            let merged = merge_lists(&prompts::merge_prompt_lists(req.prompt));
            return Ok(vec![merged; req.n]);
        }
        let image = req
            .image
            .ok_or_else(|| Error::backend("mock:world", "describe request without an image"))?;
        let visible = self.world.visible(image);
        if req.prompt == prompts::OBJECT_LIST_PROMPT {
            let text = if visible.is_empty() {
                "None".to_string()
            } else {
                visible.iter().map(|o| o.label.as_str()).collect::<Vec<_>>().join(", ")
            };
            return Ok(vec![text; req.n]);
        }
        let stream_seed = derive_seed(req.seed, &format!("{}|{}", image_hash(image), req.prompt));
        Ok((0..req.n)
            .map(|i| {
                let mut rng = replicate_rng(stream_seed, i as u64);
                self.describe_one(&visible, req.temperature, &mut rng)
            })
            .collect())
    }
}

/// Hashed bag-of-words embedder: each lowercase alphanumeric token adds one to
/// a bucket chosen by hashing the token. Cosine similarity therefore measures
/// lexical overlap.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (derive_seed(self.seed, token) % self.dim as u64) as usize
    }

    pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
    }

    /// Unnormalized term-count vector.
    pub fn raw(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for t in Self::tokens(text) {
            v[self.bucket(&t)] += 1.0;
        }
        v
    }
}

impl Embedder for MockEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| {
                let v = self.raw(t);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::backend("mock:bow", format!("text {t:?} has no tokens")));
                }
                Ok(v.into_iter().map(|x| x / norm).collect())
            })
            .collect()
    }
}

/// Returns, per requested label known to the world, the pixels painted in any
/// of its colors.
pub struct MockSegmenter {
    world: Arc<MockWorld>,
}

impl MockSegmenter {
    pub fn new(world: Arc<MockWorld>) -> Self {
        Self { world }
    }
}

impl Segmenter for MockSegmenter {
    fn segment(&self, image: &Image, labels: &[String], threshold: f64) -> Result<Vec<BitMask>> {
        let (w, h) = image.dimensions();
        let mut out = Vec::new();
        for label in labels {
            let entries: Vec<&MockObject> = self.world.find_all(label).filter(|o| o.confidence >= threshold).collect();
            let mask = BitMask::from_fn(w, h, label.clone(), |x, y| {
                let p = image.get_pixel(x, y).0;
                entries.iter().any(|o| o.color == p)
            });
            if mask.is_empty() {
                continue;
            }
            let confidence = entries
                .iter()
                .filter(|o| mask.on_pixels().any(|(x, y)| image.get_pixel(x, y).0 == o.color))
                .map(|o| o.confidence)
                .fold(0.0, f64::max);
            out.push(mask.with_confidence(confidence)?);
        }
        Ok(out)
    }
}

/// Fills the mask with the mean color of a 2-pixel ring around it.
pub struct MockInpainter;

impl Inpainter for MockInpainter {
    fn inpaint(&self, image: &Image, mask: &BitMask, _prompt: &str) -> Result<Image> {
        if mask.is_empty() {
            return Ok(image.clone());
        }
        let ring = dilate(mask, 2);
        let (mut sum, mut n) = ([0u64; 3], 0u64);
        for (x, y) in ring.on_pixels() {
            if !mask.get(x, y) {
                let p = image.get_pixel(x, y);
                for c in 0..3 {
                    sum[c] += p[c] as u64;
                }
                n += 1;
            }
        }
        let fill = if n == 0 {
            Rgb([0, 0, 0])
        } else {
            Rgb([
                ((sum[0] + n / 2) / n) as u8,
                ((sum[1] + n / 2) / n) as u8,
                ((sum[2] + n / 2) / n) as u8,
            ])
        };
        let mut out = image.clone();
        for (x, y) in mask.on_pixels() {
            out.put_pixel(x, y, fill);
        }
        Ok(out)
    }
}
