//! Flat-color scenes readable by the mock backends. Each object is painted in
//! a color unique to the dataset and carries a number of context words the
//! mock describer emits alongside its label, so removing an object deletes a
//! planned number of tokens from every description. The object with the
//! most words is the planted critical object.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::Rgb;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::css::{CssRecord, RecordStatus};
use crate::error::{Error, Result};
use crate::gateway::mock::{MockDescriber, MockObject, MockWorld};
use crate::gateway::prompts::DESCRIBE_PROMPT;
use crate::gateway::{save_image, BackendConfig, GenerateRequest, Image, Role, TextGenerator};
use crate::human::HumanResponse;
use crate::pipeline::{AgentConfig, RunConfig};
use crate::store::records::{write_atomic, write_records, Format};
use crate::util::{derive_seed, replicate_rng, slug};

pub const LABELS: &[&str] = &[
    "dog", "cat", "ball", "lamp", "chair", "bottle", "cup", "book", "plant", "clock", "bicycle", "umbrella", "kite",
    "hat", "bag", "shoe", "vase", "phone", "guitar", "man", "woman", "child", "bench", "boat", "bird", "apple",
    "candle", "drum", "fence", "horse",
];

pub const PLANTED_AGENT: &str = "planted";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_scenes: usize,
    pub width: u32,
    pub height: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Context words given to the critical object.
    pub critical_words: usize,
    /// Other objects draw distinct word counts below this bound.
    pub max_other_words: usize,
    /// Minimum empty gap between object bounding boxes, in pixels.
    pub gap: u32,
    /// Simulated participants per stimulus; zero writes no responses.
    pub participants: usize,
    /// Chance that a simulated response is off-topic.
    pub off_topic: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_scenes: 100,
            width: 128,
            height: 96,
            min_objects: 3,
            max_objects: 5,
            critical_words: 10,
            max_other_words: 7,
            gap: 16,
            participants: 12,
            off_topic: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rect,
    Disk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedObject {
    pub object_id: String,
    pub label: String,
    pub color: [u8; 3],
    pub shape: Shape,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub context: Vec<String>,
}

impl PlantedObject {
    /// Tokens the describer emits for this object.
    pub fn importance(&self) -> usize {
        self.label.split_whitespace().count() + self.context.len()
    }

    pub fn covers(&self, x: u32, y: u32) -> bool {
        if x < self.x || y < self.y || x >= self.x + self.w || y >= self.y + self.h {
            return false;
        }
        match self.shape {
            Shape::Rect => true,
            Shape::Disk => {
                let (cx, cy) = (self.x as f64 + self.w as f64 / 2.0, self.y as f64 + self.h as f64 / 2.0);
                let (dx, dy) = ((x as f64 + 0.5 - cx) / (self.w as f64 / 2.0), (y as f64 + 0.5 - cy) / (self.h as f64 / 2.0));
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedScene {
    pub scene_id: String,
    pub background: [u8; 3],
    pub objects: Vec<PlantedObject>,
}

impl PlantedScene {
    pub fn critical(&self) -> &PlantedObject {
        self.objects.iter().max_by_key(|o| o.importance()).expect("scene has objects")
    }

    pub fn render(&self, width: u32, height: u32) -> Image {
        self.render_without(width, height, None)
    }

    /// Renders the scene with `removed` (an object id) painted as background.
    pub fn render_without(&self, width: u32, height: u32, removed: Option<&str>) -> Image {
        Image::from_fn(width, height, |x, y| {
            self.objects
                .iter()
                .filter(|o| Some(o.object_id.as_str()) != removed)
                .find(|o| o.covers(x, y))
                .map(|o| Rgb(o.color))
                .unwrap_or(Rgb(self.background))
        })
    }
}

fn pseudo_word(rng: &mut impl Rng) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let mut w = String::new();
    for _ in 0..3 {
        w.push(C[rng.random_range(0..C.len())] as char);
        w.push(V[rng.random_range(0..V.len())] as char);
    }
    w
}

fn distinct_color(rng: &mut impl Rng, used: &mut HashSet<[u8; 3]>) -> [u8; 3] {
    loop {
        let c = [rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()];
        let spread = c.iter().max().unwrap() - c.iter().min().unwrap();
        if spread >= 60 && used.insert(c) {
            return c;
        }
    }
}

fn overlaps_with_gap(a: &PlantedObject, b: &PlantedObject, gap: u32) -> bool {
    let sep_x = a.x + a.w + gap <= b.x || b.x + b.w + gap <= a.x;
    let sep_y = a.y + a.h + gap <= b.y || b.y + b.h + gap <= a.y;
    !(sep_x || sep_y)
}

/// Plans every scene; pure in the config.
pub fn plan(cfg: &SynthConfig) -> Result<Vec<PlantedScene>> {
    if cfg.min_objects < 3 || cfg.max_objects < cfg.min_objects || cfg.max_objects > LABELS.len() {
        return Err(Error::Invalid("synthetic scenes need 3 <= min_objects <= max_objects".into()));
    }
    if cfg.max_other_words + 1 < cfg.max_objects || cfg.critical_words <= cfg.max_other_words {
        return Err(Error::Invalid("word budget cannot give distinct object importances".into()));
    }
    let mut used_colors = HashSet::new();
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    for s in 0..cfg.n_scenes {
        let mut rng = replicate_rng(cfg.seed, s as u64);
        let m = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let labels: Vec<&str> = LABELS.choose_multiple(&mut rng, m).copied().collect();
        let mut words: Vec<usize> = (0..cfg.max_other_words).collect();
        words.shuffle(&mut rng);
        let critical = rng.random_range(0..m);
        let grey = rng.random_range(170..=215u8);
        let mut objects: Vec<PlantedObject> = Vec::with_capacity(m);
        for (i, label) in labels.iter().enumerate() {
            let n_words = if i == critical { cfg.critical_words } else { words.pop().expect("enough word counts") };
            let mut placed = None;
            for _ in 0..1000 {
                let (w, h) = (rng.random_range(10..=18), rng.random_range(10..=18));
                let cand = PlantedObject {
                    object_id: slug(label),
                    label: label.to_string(),
                    color: [0; 3],
                    shape: if rng.random::<bool>() { Shape::Rect } else { Shape::Disk },
                    x: rng.random_range(2..cfg.width - w - 2),
                    y: rng.random_range(2..cfg.height - h - 2),
                    w,
                    h,
                    context: Vec::new(),
                };
                if objects.iter().all(|o| !overlaps_with_gap(o, &cand, cfg.gap)) {
                    placed = Some(cand);
                    break;
                }
            }
            let mut obj = placed.ok_or_else(|| Error::Invalid(format!("could not place {m} objects in scene {s}")))?;
            obj.color = distinct_color(&mut rng, &mut used_colors);
            obj.context = (0..n_words).map(|_| pseudo_word(&mut rng)).collect();
            objects.push(obj);
        }
        scenes.push(PlantedScene { scene_id: format!("scene_{s:04}"), background: [grey; 3], objects });
    }
    Ok(scenes)
}

pub fn world(scenes: &[PlantedScene]) -> MockWorld {
    let objects = scenes
        .iter()
        .flat_map(|s| s.objects.iter())
        .map(|o| MockObject {
            label: o.label.clone(),
            color: o.color,
            confidence: 0.9,
            context: o.context.clone(),
        })
        .collect();
    MockWorld::new(objects)
}

/// Reference css records ranking each scene's objects by planned importance.
pub fn planted_truth(scenes: &[PlantedScene]) -> Vec<CssRecord> {
    let mut out = Vec::new();
    for s in scenes {
        let total: usize = s.objects.iter().map(PlantedObject::importance).sum();
        for o in &s.objects {
            out.push(CssRecord {
                agent_id: PLANTED_AGENT.into(),
                scene_id: s.scene_id.clone(),
                object_id: o.object_id.clone(),
                variant_id: format!("{}_{}", s.scene_id, o.object_id),
                css: Some(o.importance() as f64 / total as f64),
                status: RecordStatus::Ok,
                n_factual: 0,
                n_counterfactual: 0,
                factual_ref: String::new(),
                counterfactual_ref: String::new(),
                error: None,
            });
        }
    }
    out
}

/// Simulated participant responses: stochastic mock descriptions of each
/// factual image and of each single-object removal, with a share of
/// off-topic answers for the relevance filter to catch.
pub fn synth_responses(scenes: &[PlantedScene], cfg: &SynthConfig) -> Result<Vec<HumanResponse>> {
    let describer = MockDescriber::new(Arc::new(world(scenes)));
    let seed = derive_seed(cfg.seed, "participants");
    let noise = derive_seed(cfg.seed, "off-topic");
    let mut out = Vec::new();
    for s in scenes {
        let stimuli = std::iter::once((s.scene_id.clone(), None))
            .chain(s.objects.iter().map(|o| (format!("{}_{}", s.scene_id, o.object_id), Some(o.object_id.as_str()))));
        for (stimulus_id, removed) in stimuli {
            let image = s.render_without(cfg.width, cfg.height, removed);
            let req = GenerateRequest {
                image: Some(&image),
                prompt: DESCRIBE_PROMPT,
                n: cfg.participants,
                temperature: 1.0,
                max_tokens: 256,
                seed,
            };
            let texts = describer.generate(&req)?;
            let mut rng = replicate_rng(derive_seed(noise, &stimulus_id), 0);
            for (k, text) in texts.into_iter().enumerate() {
                let text = if rng.random::<f64>() < cfg.off_topic {
                    (0..6).map(|_| pseudo_word(&mut rng)).collect::<Vec<_>>().join(" ")
                } else {
                    text
                };
                out.push(HumanResponse { participant_id: format!("p{k:03}"), stimulus_id: stimulus_id.clone(), text });
            }
        }
    }
    Ok(out)
}

/// Agents of the synthetic run: the mock describer at three temperatures.
pub fn synth_agents() -> Vec<AgentConfig> {
    [("mock-t00", 0.0), ("mock-t05", 0.5), ("mock-t10", 1.0)]
        .into_iter()
        .map(|(id, t)| AgentConfig {
            agent_id: id.into(),
            describe: BackendConfig { temperature: t, ..BackendConfig::for_role(Role::Describe, "mock:world") },
        })
        .collect()
}

/// Run config for a dataset written by [`generate`], with paths relative to
/// its root. Variants are accepted without annotator review and alignment
/// is measured against the planted ranking.
pub fn run_config(cfg: &SynthConfig) -> RunConfig {
    let mut run = RunConfig {
        images: Some("images".into()),
        output_dir: "out".into(),
        mock_world: Some("mock_world.json".into()),
        agents: synth_agents(),
        seed: cfg.seed,
        ..Default::default()
    };
    run.prepare.auto_accept = true;
    run.eval.truth_agent = PLANTED_AGENT.into();
    run.eval.truth_file = Some("truth.json".into());
    if cfg.participants > 0 {
        run.human.responses = Some("responses.csv".into());
    }
    run
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub root: PathBuf,
    pub image_dir: PathBuf,
    pub world_path: PathBuf,
    pub truth_path: PathBuf,
    pub config_path: PathBuf,
    pub scenes: Vec<PlantedScene>,
}

/// Writes `images/<scene>.png`, `mock_world.json`, `truth.json`,
/// `responses.csv`, `run.json` and `synth.json` (config plus plan) under
/// `root`.
pub fn generate(cfg: &SynthConfig, root: &Path) -> Result<SynthDataset> {
    let scenes = plan(cfg)?;
    let image_dir = root.join("images");
    for s in &scenes {
        save_image(&s.render(cfg.width, cfg.height), &image_dir.join(format!("{}.png", s.scene_id)))?;
    }
    let world_path = root.join("mock_world.json");
    let world_json = serde_json::to_vec_pretty(&world(&scenes)).expect("world serializes");
    write_atomic(&world_path, &world_json)?;
    let truth_path = root.join("truth.json");
    write_records(&planted_truth(&scenes), &truth_path, Format::Json)?;
    if cfg.participants > 0 {
        write_records(&synth_responses(&scenes, cfg)?, &root.join("responses.csv"), Format::Csv)?;
    }
    let config_path = root.join("run.json");
    write_atomic(&config_path, &run_config(cfg).to_json())?;
    let meta = serde_json::json!({ "config": cfg, "scenes": scenes });
    write_atomic(&root.join("synth.json"), &serde_json::to_vec_pretty(&meta).expect("plan serializes"))?;
    Ok(SynthDataset { root: root.to_path_buf(), image_dir, world_path, truth_path, config_path, scenes })
}
