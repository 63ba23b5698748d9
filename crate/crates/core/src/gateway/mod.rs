//! Uniform client for the four black-box capabilities the pipeline needs:
//! text generation (scene descriptions and object lists), sentence embedding,
//! text-prompted segmentation and mask-guided inpainting.
//!
//! Every capability is a trait with two implementations: an HTTP client for
//! the JSON wire protocol in [`protocol`] and a deterministic offline mock in
//! [`mock`]. Endpoints of the form `mock:<name>` select the mock.

pub mod conformance;
pub mod mock;
pub mod prompts;
pub mod protocol;

use std::collections::BTreeSet;
use std::io::Cursor;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BitMask;
use crate::store::Sampling;
use crate::util::sha256_hex;

pub use mock::{MockEmbedder, MockWorld};

pub type Image = RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Describe,
    Embed,
    Segment,
    Inpaint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub role: Role,
    /// `http(s)://host:port` base URL or `mock:<name>`.
    pub endpoint: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub n_samples: usize,
    /// Greedy decoding: one generation duplicated `n_samples` times.
    pub deterministic: bool,
    pub prompt_template: String,
    pub timeout_secs: f64,
    pub retries: u32,
    pub max_in_flight: usize,
    pub seed: u64,
    /// Name of the environment variable holding the API key, if any.
    pub api_key_env: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            role: Role::Describe,
            endpoint: "mock:world".into(),
            model_name: "mock".into(),
            temperature: 1.0,
            max_tokens: 16_384,
            n_samples: 5,
            deterministic: false,
            prompt_template: prompts::DESCRIBE_PROMPT.into(),
            timeout_secs: 120.0,
            retries: 3,
            max_in_flight: 8,
            seed: 0,
            api_key_env: None,
        }
    }
}

impl BackendConfig {
    pub fn for_role(role: Role, endpoint: impl Into<String>) -> Self {
        let prompt = match role {
            Role::Describe => prompts::DESCRIBE_PROMPT,
            Role::Inpaint => prompts::REMOVAL_PROMPT,
            Role::Embed | Role::Segment => "",
        };
        Self {
            role,
            endpoint: endpoint.into(),
            prompt_template: prompt.into(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Invalid(format!("{:?} backend: n_samples must be >= 1", self.role)));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Invalid(format!("{:?} backend: temperature must be >= 0", self.role)));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Invalid(format!("{:?} backend: max_in_flight must be >= 1", self.role)));
        }
        if !self.endpoint.starts_with("mock:")
            && !self.endpoint.starts_with("http://")
            && !self.endpoint.starts_with("https://")
        {
            return Err(Error::Invalid(format!("unsupported endpoint {:?}", self.endpoint)));
        }
        Ok(())
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic || self.temperature == 0.0
    }

    pub fn sampling(&self) -> Sampling {
        Sampling {
            temperature: if self.is_deterministic() { 0.0 } else { self.temperature },
            n_samples: self.n_samples,
            deterministic: self.is_deterministic(),
        }
    }
}

/// One generation call: prompt, optional image and sampling parameters.
#[derive(Debug, Clone, Copy)]
pub struct GenerateRequest<'a> {
    pub image: Option<&'a Image>,
    pub prompt: &'a str,
    pub n: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
}

pub trait TextGenerator: Send + Sync {
    fn generate(&self, req: &GenerateRequest<'_>) -> Result<Vec<String>>;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

pub trait Segmenter: Send + Sync {
    fn segment(&self, image: &Image, labels: &[String], threshold: f64) -> Result<Vec<BitMask>>;
}

pub trait Inpainter: Send + Sync {
    fn inpaint(&self, image: &Image, mask: &BitMask, prompt: &str) -> Result<Image>;
}

/// Counting semaphore capping concurrent requests to one backend.
#[derive(Debug)]
struct InFlight {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct InFlightGuard<'a>(&'a InFlight);

impl InFlight {
    fn new(max: usize) -> Self {
        Self { max: max.max(1), active: Mutex::new(0), freed: Condvar::new() }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.max {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        InFlightGuard(self)
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

/// Runs `op` up to `1 + retries` times with exponential backoff, retrying
/// only backend/protocol failures.
fn with_retries<T>(cfg: &BackendConfig, mut op: impl FnMut(u32) -> Result<T>) -> Result<T> {
    let mut attempt = 0;
    loop {
        match op(attempt) {
            Err(e) if e.is_backend() && attempt < cfg.retries => {
                let delay = Duration::from_millis(25u64 << attempt.min(8));
                log::warn!("{:?} backend attempt {} failed: {e}; retrying in {delay:?}", cfg.role, attempt + 1);
                if !cfg.endpoint.starts_with("mock:") {
                    std::thread::sleep(delay);
                }
                attempt += 1;
            }
            other => return other,
        }
    }
}

struct Client<B: ?Sized> {
    cfg: BackendConfig,
    backend: Arc<B>,
    in_flight: InFlight,
}

impl<B: ?Sized> Client<B> {
    fn new(cfg: BackendConfig, backend: Arc<B>) -> Self {
        let in_flight = InFlight::new(cfg.max_in_flight);
        Self { cfg, backend, in_flight }
    }
}

/// Descriptions returned by [`Gateway::describe`].
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptions {
    pub texts: Vec<String>,
    pub sampling: Sampling,
}

#[derive(Default)]
pub struct Gateway {
    generator: Option<Client<dyn TextGenerator>>,
    embedder: Option<Client<dyn Embedder>>,
    segmenter: Option<Client<dyn Segmenter>>,
    inpainter: Option<Client<dyn Inpainter>>,
}

fn missing(role: Role) -> Error {
    Error::Invalid(format!("no {role:?} backend configured"))
}

impl Gateway {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_generator(mut self, cfg: BackendConfig, backend: Arc<dyn TextGenerator>) -> Self {
        self.generator = Some(Client::new(cfg, backend));
        self
    }

    pub fn with_embedder(mut self, cfg: BackendConfig, backend: Arc<dyn Embedder>) -> Self {
        self.embedder = Some(Client::new(cfg, backend));
        self
    }

    pub fn with_segmenter(mut self, cfg: BackendConfig, backend: Arc<dyn Segmenter>) -> Self {
        self.segmenter = Some(Client::new(cfg, backend));
        self
    }

    pub fn with_inpainter(mut self, cfg: BackendConfig, backend: Arc<dyn Inpainter>) -> Self {
        self.inpainter = Some(Client::new(cfg, backend));
        self
    }

    /// Builds every configured role from its endpoint. Mock endpoints other
    /// than the embedder need a mock world.
    pub fn connect(configs: &[BackendConfig], world: Option<Arc<MockWorld>>) -> Result<Self> {
        let mut gw = Gateway::new();
        for cfg in configs {
            cfg.validate()?;
            let cfg = cfg.clone();
            if let Some(name) = cfg.endpoint.strip_prefix("mock:") {
                let need_world = || {
                    world
                        .clone()
                        .ok_or_else(|| Error::Invalid(format!("mock:{name} {:?} backend needs a mock world", cfg.role)))
                };
                gw = match cfg.role {
                    Role::Embed => {
                        let e = Arc::new(MockEmbedder::new(mock::DEFAULT_EMBED_DIM, cfg.seed));
                        gw.with_embedder(cfg, e)
                    }
                    Role::Describe => {
                        let w = need_world()?;
                        gw.with_generator(cfg, Arc::new(mock::MockDescriber::new(w)))
                    }
                    Role::Segment => {
                        let w = need_world()?;
                        gw.with_segmenter(cfg, Arc::new(mock::MockSegmenter::new(w)))
                    }
                    Role::Inpaint => gw.with_inpainter(cfg, Arc::new(mock::MockInpainter)),
                };
            } else {
                let api_key = cfg.api_key_env.as_deref().and_then(|v| std::env::var(v).ok());
                let http = Arc::new(protocol::HttpBackend::new(
                    &cfg.endpoint,
                    Duration::from_secs_f64(cfg.timeout_secs),
                    api_key,
                ));
                gw = match cfg.role {
                    Role::Describe => gw.with_generator(cfg, http),
                    Role::Embed => gw.with_embedder(cfg, http),
                    Role::Segment => gw.with_segmenter(cfg, http),
                    Role::Inpaint => gw.with_inpainter(cfg, http),
                };
            }
        }
        Ok(gw)
    }

    pub fn describe_config(&self) -> Option<&BackendConfig> {
        self.generator.as_ref().map(|c| &c.cfg)
    }

    /// Samples `n_samples` scene descriptions. Deterministic configs issue one
    /// greedy generation and duplicate it. Empty generations are retried.
    pub fn describe(&self, image: &Image) -> Result<Descriptions> {
        let client = self.generator.as_ref().ok_or_else(|| missing(Role::Describe))?;
        let cfg = &client.cfg;
        let deterministic = cfg.is_deterministic();
        let (n, temperature) = if deterministic { (1, 0.0) } else { (cfg.n_samples, cfg.temperature) };
        let texts = with_retries(cfg, |attempt| {
            let _slot = client.in_flight.acquire();
            let raw = client.backend.generate(&GenerateRequest {
                image: Some(image),
                prompt: &cfg.prompt_template,
                n,
                temperature,
                max_tokens: cfg.max_tokens,
                seed: cfg.seed.wrapping_add(attempt as u64),
            })?;
            if raw.len() != n {
                return Err(Error::Protocol(format!("asked for {n} texts, got {}", raw.len())));
            }
            let texts: Vec<String> = raw.iter().map(|t| prompts::final_description(t)).collect();
            if texts.iter().any(String::is_empty) {
                return Err(Error::backend(&cfg.endpoint, "empty generation"));
            }
            Ok(texts)
        })?;
        let texts = if deterministic { vec![texts[0].clone(); cfg.n_samples] } else { texts };
        Ok(Descriptions { texts, sampling: cfg.sampling() })
    }

    /// Embeds `texts` and L2-normalizes every vector.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let client = self.embedder.as_ref().ok_or_else(|| missing(Role::Embed))?;
        if texts.is_empty() {
            return Err(Error::Invalid("embed called with no texts".into()));
        }
        with_retries(&client.cfg, |_| {
            let _slot = client.in_flight.acquire();
            let vectors = client.backend.embed(texts)?;
            if vectors.len() != texts.len() {
                return Err(Error::Protocol(format!("{} vectors for {} texts", vectors.len(), texts.len())));
            }
            let dim = vectors[0].len();
            if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
                return Err(Error::Protocol("inconsistent embedding dimensions in batch".into()));
            }
            vectors.into_iter().map(normalize).collect()
        })
    }

    /// Object-list generation: two sampled listings, then one merge request.
    pub fn generate_object_list(&self, image: &Image) -> Result<Vec<String>> {
        let client = self.generator.as_ref().ok_or_else(|| missing(Role::Describe))?;
        let cfg = &client.cfg;
        let ask = |prompt: &str, image: Option<&Image>, seed: u64| -> Result<Vec<String>> {
            let mut last_raw = String::new();
            for attempt in 0..2u64 {
                let raw = with_retries(cfg, |_| {
                    let _slot = client.in_flight.acquire();
                    client.backend.generate(&GenerateRequest {
                        image,
                        prompt,
                        n: 1,
                        temperature: 1.0,
                        max_tokens: cfg.max_tokens,
                        seed: seed.wrapping_add(attempt * 1_000_003),
                    })
                })?;
                let text = raw.first().map(|t| prompts::final_description(t)).unwrap_or_default();
                if let Some(list) = parse_object_list(&text) {
                    return Ok(list);
                }
                last_raw = text;
            }
            Err(Error::Protocol(format!("unparseable object list response: {last_raw:?}")))
        };
        let first = ask(prompts::OBJECT_LIST_PROMPT, Some(image), cfg.seed)?;
        let second = ask(prompts::OBJECT_LIST_PROMPT, Some(image), cfg.seed.wrapping_add(1))?;
        let render = |l: &[String]| if l.is_empty() { "None".to_string() } else { l.join(", ") };
        let merged = ask(&prompts::merge_prompt(&[render(&first), render(&second)]), None, cfg.seed)?;
        Ok(dedup_labels(merged))
    }

    /// Masks for `labels` with confidence at or above `threshold`.
    pub fn segment(&self, image: &Image, labels: &[String], threshold: f64) -> Result<Vec<BitMask>> {
        let client = self.segmenter.as_ref().ok_or_else(|| missing(Role::Segment))?;
        if labels.is_empty() {
            return Err(Error::Invalid("segment called with no labels".into()));
        }
        let masks = with_retries(&client.cfg, |_| {
            let _slot = client.in_flight.acquire();
            client.backend.segment(image, labels, threshold)
        })?;
        for m in &masks {
            if m.dims() != image.dimensions() {
                return Err(Error::Protocol(format!("mask {:?} has wrong dimensions", m.label)));
            }
        }
        Ok(masks.into_iter().filter(|m| m.confidence >= threshold).collect())
    }

    /// Sends the image with a translucent red overlay on `mask` plus the
    /// removal prompt; the result must keep the input dimensions.
    pub fn inpaint(&self, image: &Image, mask: &BitMask) -> Result<Image> {
        let client = self.inpainter.as_ref().ok_or_else(|| missing(Role::Inpaint))?;
        if mask.dims() != image.dimensions() {
            return Err(Error::dims(image.dimensions(), mask.dims()));
        }
        let overlaid = red_overlay(image, mask);
        let out = with_retries(&client.cfg, |_| {
            let _slot = client.in_flight.acquire();
            client.backend.inpaint(&overlaid, mask, &client.cfg.prompt_template)
        })?;
        if out.dimensions() != image.dimensions() {
            return Err(Error::backend(
                &client.cfg.endpoint,
                format!("inpainted image is {:?}, expected {:?}", out.dimensions(), image.dimensions()),
            ));
        }
        Ok(out)
    }
}

fn normalize(v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Protocol("zero or non-finite embedding vector".into()));
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

/// Parses a comma-separated object list. `None` means empty; `None` (the
/// Option) means the response is not a list at all.
pub fn parse_object_list(text: &str) -> Option<Vec<String>> {
    let t = text.trim().trim_matches(|c| c == '\'' || c == '"').trim().trim_end_matches('.');
    if t.is_empty() || t.contains('\n') {
        return None;
    }
    if t.eq_ignore_ascii_case("none") {
        return Some(Vec::new());
    }
    let items: Vec<String> = t
        .split(',')
        .map(|s| s.trim().trim_matches(|c| c == '\'' || c == '"').trim().to_string())
        .collect();
    if items.iter().any(|s| s.is_empty() || s.split_whitespace().count() > 8) {
        return None;
    }
    Some(items)
}

/// Case-insensitive dedup preserving first occurrence.
pub fn dedup_labels(labels: Vec<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    labels
        .into_iter()
        .filter(|l| !l.eq_ignore_ascii_case("none") && seen.insert(l.to_lowercase()))
        .collect()
}

pub fn red_overlay(image: &Image, mask: &BitMask) -> Image {
    let mut out = image.clone();
    for (x, y) in mask.on_pixels() {
        let p = out.get_pixel_mut(x, y);
        *p = Rgb([
            ((p[0] as u16 + 255) / 2) as u8,
            (p[1] as u16 / 2) as u8,
            (p[2] as u16 / 2) as u8,
        ]);
    }
    out
}

pub fn image_hash(image: &Image) -> String {
    let mut bytes = Vec::with_capacity(image.as_raw().len() + 8);
    bytes.extend_from_slice(&image.width().to_le_bytes());
    bytes.extend_from_slice(&image.height().to_le_bytes());
    bytes.extend_from_slice(image.as_raw());
    sha256_hex(&bytes)
}

pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    image.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8())
}

pub fn image_to_base64(image: &Image) -> Result<String> {
    Ok(base64::engine::general_purpose::STANDARD.encode(encode_png(image)?))
}

pub fn image_from_base64(data: &str) -> Result<Image> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(data)
        .map_err(|e| Error::Protocol(format!("bad base64 image: {e}")))?;
    decode_png(&bytes)
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(image::load_from_memory(&bytes)?.to_rgb8())
}

pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    crate::store::records::write_atomic(path, &encode_png(image)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn world() -> Arc<MockWorld> {
        Arc::new(MockWorld::new(vec![
            mock::MockObject::new("dog", [200, 40, 40]),
            mock::MockObject::new("ball", [40, 40, 200]),
        ]))
    }

    fn scene_image() -> Image {
        let mut img = RgbImage::from_pixel(40, 30, Rgb([128, 128, 128]));
        for y in 5..12 {
            for x in 5..12 {
                img.put_pixel(x, y, Rgb([200, 40, 40]));
            }
        }
        for y in 15..20 {
            for x in 25..30 {
                img.put_pixel(x, y, Rgb([40, 40, 200]));
            }
        }
        img
    }

    fn gateway(describe: BackendConfig) -> Gateway {
        let w = world();
        Gateway::connect(
            &[
                describe,
                BackendConfig::for_role(Role::Embed, "mock:bow"),
                BackendConfig::for_role(Role::Segment, "mock:world"),
                BackendConfig::for_role(Role::Inpaint, "mock:fill"),
            ],
            Some(w),
        )
        .unwrap()
    }

    #[test]
    fn describe_mentions_present_objects() {
        let gw = gateway(BackendConfig { n_samples: 5, temperature: 0.0, ..BackendConfig::for_role(Role::Describe, "mock:world") });
        let d = gw.describe(&scene_image()).unwrap();
        assert_eq!(d.texts.len(), 5);
        assert!(d.sampling.deterministic);
        assert!(d.texts[0].contains("dog") && d.texts[0].contains("ball"));
        assert!(d.texts.iter().all(|t| t == &d.texts[0]));
    }

    #[test]
    fn describe_samples_n_texts() {
        let gw = gateway(BackendConfig { n_samples: 5, ..BackendConfig::for_role(Role::Describe, "mock:world") });
        let a = gw.describe(&scene_image()).unwrap();
        let b = gw.describe(&scene_image()).unwrap();
        assert_eq!(a.texts.len(), 5);
        assert_eq!(a, b);
        assert!(!a.sampling.deterministic);
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let gw = gateway(BackendConfig::for_role(Role::Describe, "mock:world"));
        let v = gw.embed(&["a".into(), "a".into(), "the quick brown fox".into()]).unwrap();
        for x in &v {
            let n: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let cos: f64 = v[0].iter().zip(&v[1]).map(|(a, b)| a * b).sum();
        assert!((cos - 1.0).abs() < 1e-12);
        assert!(gw.embed(&[]).is_err());
    }

    #[test]
    fn segment_threshold_filters() {
        let gw = gateway(BackendConfig::for_role(Role::Describe, "mock:world"));
        let labels = vec!["dog".to_string(), "ball".to_string()];
        assert_eq!(gw.segment(&scene_image(), &labels, 0.4).unwrap().len(), 2);
        assert!(gw.segment(&scene_image(), &labels, 1.01).unwrap().is_empty());
        let dog = &gw.segment(&scene_image(), &labels[..1], 0.4).unwrap()[0];
        assert_eq!(dog.area(), 49);
    }

    #[test]
    fn confidence_threshold_boundary() {
        let w = Arc::new(MockWorld::new(vec![
            mock::MockObject::new("dog", [200, 40, 40]).with_confidence(0.41),
            mock::MockObject::new("ball", [40, 40, 200]).with_confidence(0.39),
        ]));
        let gw = Gateway::connect(&[BackendConfig::for_role(Role::Segment, "mock:world")], Some(w)).unwrap();
        let masks = gw.segment(&scene_image(), &["dog".into(), "ball".into()], 0.4).unwrap();
        assert_eq!(masks.len(), 1);
        assert_eq!(masks[0].label, "dog");
    }

    #[test]
    fn inpaint_mock_contract() {
        let gw = gateway(BackendConfig::for_role(Role::Describe, "mock:world"));
        let img = scene_image();
        let empty = BitMask::empty(40, 30, "none");
        assert_eq!(gw.inpaint(&img, &empty).unwrap(), img);
        let dog = BitMask::rect(40, 30, "dog", 5, 5, 7, 7);
        let out = gw.inpaint(&img, &dog).unwrap();
        for (x, y, p) in out.enumerate_pixels() {
            if dog.get(x, y) {
                assert_eq!(*p, Rgb([128, 128, 128]));
            } else {
                assert_eq!(p, img.get_pixel(x, y));
            }
        }
        assert!(gw.inpaint(&img, &BitMask::empty(4, 4, "x")).is_err());
    }

    #[test]
    fn object_list_two_samples_then_merge() {
        let gw = gateway(BackendConfig::for_role(Role::Describe, "mock:world"));
        let labels = gw.generate_object_list(&scene_image()).unwrap();
        assert_eq!(labels, vec!["dog".to_string(), "ball".to_string()]);
        let blank = RgbImage::from_pixel(10, 10, Rgb([128, 128, 128]));
        assert!(gw.generate_object_list(&blank).unwrap().is_empty());
    }

    struct Scripted {
        responses: Vec<&'static str>,
        calls: AtomicUsize,
        prompts: Mutex<Vec<String>>,
    }

    impl TextGenerator for Scripted {
        fn generate(&self, req: &GenerateRequest<'_>) -> Result<Vec<String>> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            self.prompts.lock().unwrap().push(req.prompt.to_string());
            Ok(vec![self.responses[i.min(self.responses.len() - 1)].to_string()])
        }
    }

    fn scripted(responses: Vec<&'static str>) -> (Gateway, Arc<Scripted>) {
        let s = Arc::new(Scripted { responses, calls: AtomicUsize::new(0), prompts: Mutex::new(vec![]) });
        let gw = Gateway::new().with_generator(BackendConfig::for_role(Role::Describe, "mock:script"), s.clone());
        (gw, s)
    }

    #[test]
    fn object_list_merge_with_split_rule_passthrough() {
        let (gw, s) = scripted(vec!["red car, man", "red car, blue car", "red car, man, blue car"]);
        let labels = gw.generate_object_list(&scene_image()).unwrap();
        assert_eq!(labels, vec!["red car", "man", "blue car"]);
        let prompts = s.prompts.lock().unwrap();
        assert_eq!(prompts.len(), 3);
        assert_eq!(prompts[0], prompts::OBJECT_LIST_PROMPT);
        assert!(prompts[2].contains("List 1: red car, man") && prompts[2].contains("List 2: red car, blue car"));
    }

    #[test]
    fn unparseable_list_retried_once_then_error() {
        let (gw, s) = scripted(vec!["Sure!\nHere are the objects:", "dog, cat", "dog, cat", "dog, cat"]);
        assert_eq!(gw.generate_object_list(&scene_image()).unwrap(), vec!["dog", "cat"]);
        assert_eq!(s.calls.load(Ordering::SeqCst), 4);

        let (gw, _) = scripted(vec!["Sure!\nHere:", "I see:\n a dog"]);
        let err = gw.generate_object_list(&scene_image()).unwrap_err();
        assert!(err.to_string().contains("I see"), "{err}");
    }

    #[test]
    fn parse_object_list_cases() {
        assert_eq!(parse_object_list("None"), Some(vec![]));
        assert_eq!(parse_object_list("'red car, man in black'"), Some(vec!["red car".into(), "man in black".into()]));
        assert_eq!(parse_object_list(""), None);
        assert_eq!(parse_object_list("a,,b"), None);
    }

    struct Flaky {
        fails: AtomicUsize,
    }

    impl Embedder for Flaky {
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
            if self.fails.fetch_sub(1, Ordering::SeqCst) > 0 {
                return Err(Error::backend("flaky", "503"));
            }
            Ok(texts.iter().map(|_| vec![3.0, 4.0]).collect())
        }
    }

    #[test]
    fn retries_then_normalizes() {
        let cfg = BackendConfig { retries: 2, ..BackendConfig::for_role(Role::Embed, "mock:flaky") };
        let gw = Gateway::new().with_embedder(cfg.clone(), Arc::new(Flaky { fails: AtomicUsize::new(2) }));
        assert_eq!(gw.embed(&["x".into()]).unwrap(), vec![vec![0.6, 0.8]]);
        let gw = Gateway::new().with_embedder(cfg, Arc::new(Flaky { fails: AtomicUsize::new(3) }));
        assert!(gw.embed(&["x".into()]).unwrap_err().is_backend());
    }

    struct Ragged;

    impl Embedder for Ragged {
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
            Ok(texts.iter().enumerate().map(|(i, _)| vec![1.0; i + 1]).collect())
        }
    }

    #[test]
    fn ragged_batch_is_protocol_error() {
        let cfg = BackendConfig { retries: 0, ..BackendConfig::for_role(Role::Embed, "mock:ragged") };
        let gw = Gateway::new().with_embedder(cfg, Arc::new(Ragged));
        assert!(matches!(gw.embed(&["a".into(), "b".into()]), Err(Error::Protocol(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = BackendConfig::for_role(Role::Describe, "mock:world");
        c.validate().unwrap();
        c.n_samples = 0;
        assert!(c.validate().is_err());
        c.n_samples = 1;
        c.endpoint = "ftp://x".into();
        assert!(c.validate().is_err());
        assert_eq!(BackendConfig::default().max_tokens, 16_384);
        assert_eq!(BackendConfig::default().prompt_template, prompts::DESCRIBE_PROMPT);
    }
}
