//! Token-level saliency stacks from white-box attribution, max-aggregated
//! into one raster per scene and compared with css rankings.
//!
//! Stack file: one JSON header line
//! `{"scene_id", "method", "token_count", "width", "height", "dtype": "float32"}`
//! terminated by `\n`, then `token_count * width * height` little-endian f32
//! values, row-major, tokens concatenated.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::{kendall_tau, rankings_by_scene, SceneRanking};
use crate::css::CssRecord;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gbvs::max_in_mask;
use crate::mask::BitMask;
use crate::raster::SaliencyRaster;
use crate::store::records::write_atomic;
use crate::store::{Record, SceneSet};
use crate::util::sig6;

pub const STACK_EXTENSION: &str = "stack";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StackMethod {
    RawAttention,
    GradientCam,
    AttentionGuidedCam,
    Other,
}

impl StackMethod {
    pub fn name(self) -> &'static str {
        match self {
            StackMethod::RawAttention => "raw-attention",
            StackMethod::GradientCam => "gradient-cam",
            StackMethod::AttentionGuidedCam => "attention-guided-cam",
            StackMethod::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackHeader {
    pub scene_id: String,
    pub method: StackMethod,
    pub token_count: usize,
    pub width: u32,
    pub height: u32,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyStack {
    pub scene_id: String,
    pub method: StackMethod,
    pub width: u32,
    pub height: u32,
    /// Token-major maps, `width * height` values each.
    pub maps: Vec<Vec<f32>>,
    /// Resolution declared in the file, when the maps were resampled on load.
    pub declared: Option<(u32, u32)>,
}

impl SaliencyStack {
    pub fn new(scene_id: &str, method: StackMethod, width: u32, height: u32, maps: Vec<Vec<f32>>) -> Result<Self> {
        let s = Self { scene_id: scene_id.into(), method, width, height, maps, declared: None };
        s.validate()?;
        Ok(s)
    }

    pub fn token_count(&self) -> usize {
        self.maps.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.maps.is_empty() {
            return Err(Error::Invalid(format!("stack for {}: no tokens", self.scene_id)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid(format!("stack for {}: empty resolution", self.scene_id)));
        }
        let n = self.width as usize * self.height as usize;
        for (t, m) in self.maps.iter().enumerate() {
            if m.len() != n {
                return Err(Error::Invalid(format!("stack for {}: token {t} has {} values, expected {n}", self.scene_id, m.len())));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("stack for {}: token {t}", self.scene_id)));
            }
        }
        Ok(())
    }

    pub fn header(&self) -> StackHeader {
        StackHeader {
            scene_id: self.scene_id.clone(),
            method: self.method,
            token_count: self.maps.len(),
            width: self.width,
            height: self.height,
            dtype: "float32".into(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header()).expect("header serializes");
        out.push(b'\n');
        for m in &self.maps {
            for v in m {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], location: &str) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Corrupt(format!("{location}: missing stack header line")))?;
        let header: StackHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::parse(location, e))?;
        if header.dtype != "float32" {
            return Err(Error::Corrupt(format!("{location}: unsupported dtype {}", header.dtype)));
        }
        let per_map = header.width as usize * header.height as usize;
        let expected = header.token_count * per_map * 4;
        let payload = &bytes[nl + 1..];
        if payload.len() != expected {
            return Err(Error::Corrupt(format!(
                "{location}: payload has {} bytes, header declares {expected}",
                payload.len()
            )));
        }
        let values: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let maps = if per_map == 0 { Vec::new() } else { values.chunks(per_map).map(<[f32]>::to_vec).collect() };
        let s = Self {
            scene_id: header.scene_id,
            method: header.method,
            width: header.width,
            height: header.height,
            maps,
            declared: None,
        };
        s.validate().map_err(|e| Error::Corrupt(format!("{location}: {e}")))?;
        Ok(s)
    }

    /// Bilinear resampling of every token map; a no-op at the same size.
    pub fn resampled(self, width: u32, height: u32) -> Self {
        if (width, height) == (self.width, self.height) {
            return self;
        }
        let maps = self
            .maps
            .iter()
            .map(|m| {
                let r = SaliencyRaster::from_values(self.width, self.height, m.iter().map(|&v| v as f64).collect())
                    .expect("validated map");
                r.resize_bilinear(width, height).values.into_iter().map(|v| v as f32).collect()
            })
            .collect();
        Self { maps, width, height, declared: Some((self.width, self.height)), ..self }
    }
}

pub fn save_stack(stack: &SaliencyStack, path: &Path) -> Result<()> {
    stack.validate()?;
    write_atomic(path, &stack.to_bytes())
}

/// Reads a stack and, given the scene resolution, resamples it there.
pub fn load_stack(path: &Path, scene_dims: Option<(u32, u32)>) -> Result<SaliencyStack> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let s = SaliencyStack::from_bytes(&bytes, &path.display().to_string())?;
    Ok(match scene_dims {
        Some((w, h)) => s.resampled(w, h),
        None => s,
    })
}

/// Pixelwise maximum over tokens, min-max rescaled. A constant result is
/// returned unscaled, so an all-zero stack stays all zero.
pub fn max_aggregate(stack: &SaliencyStack) -> SaliencyRaster {
    let n = stack.width as usize * stack.height as usize;
    let mut values = vec![f64::NEG_INFINITY; n];
    for m in &stack.maps {
        for (acc, &v) in values.iter_mut().zip(m) {
            *acc = acc.max(v as f64);
        }
    }
    SaliencyRaster::from_values(stack.width, stack.height, values)
        .expect("validated stack")
        .rescale_min_max()
}

/// Max-in-mask score for each object, as a ranking under `agent_id`.
pub fn object_scores(
    raster: &SaliencyRaster,
    scene_id: &str,
    agent_id: &str,
    masks: &[(String, BitMask)],
) -> Result<SceneRanking> {
    let entries = masks
        .iter()
        .map(|(id, m)| Ok((id.clone(), max_in_mask(raster, m)?)))
        .collect::<Result<Vec<_>>>()?;
    SceneRanking::new(scene_id, agent_id, entries)
}

/// Tie-aware τ between white-box object scores and css values; `None` when
/// either side is fully tied.
pub fn compare_to_css(scores: &SceneRanking, css: &SceneRanking) -> Result<Option<f64>> {
    kendall_tau(scores, css)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteboxScene {
    pub method: StackMethod,
    pub scene_id: String,
    pub n_objects: usize,
    pub token_count: usize,
    #[serde(with = "sig6::opt")]
    pub tau: Option<f64>,
    /// Declared stack resolution, empty when it matched the scene.
    pub resampled_from: String,
}

impl Record for WhiteboxScene {
    const KIND: &'static str = "whitebox-scenes";
    const COLUMNS: &'static [&'static str] =
        &["method", "scene_id", "n_objects", "token_count", "tau", "resampled_from"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteboxSummary {
    pub method: StackMethod,
    pub agent_id: String,
    pub n_scenes: usize,
    pub n_tau_undefined: usize,
    #[serde(with = "sig6::opt")]
    pub tau_mean: Option<f64>,
}

impl Record for WhiteboxSummary {
    const KIND: &'static str = "whitebox";
    const COLUMNS: &'static [&'static str] = &["method", "agent_id", "n_scenes", "n_tau_undefined", "tau_mean"];
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhiteboxReport {
    pub scenes: Vec<WhiteboxScene>,
    pub summaries: Vec<WhiteboxSummary>,
}

/// Every `*.stack` file in `dir`, sorted by path.
pub fn stack_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().and_then(|e| e.to_str()) == Some(STACK_EXTENSION) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Scores every stack against the css records of `agent_id`: one row per
/// stack and the mean τ per method. Stacks for unknown scenes are errors;
/// scenes without css for that agent are skipped with a warning.
pub fn compare_dataset(
    set: &SceneSet,
    stacks: &[PathBuf],
    css_records: &[CssRecord],
    agent_id: &str,
    exec: Execution,
) -> Result<WhiteboxReport> {
    let own: Vec<CssRecord> = css_records.iter().filter(|r| r.agent_id == agent_id).cloned().collect();
    let rankings = rankings_by_scene(&own)?;
    let rows: Vec<Result<Option<WhiteboxScene>>> = exec.map_slice(stacks, |path| {
        let header_only = load_stack(path, None)?;
        let scene = set
            .scene(&header_only.scene_id)
            .ok_or_else(|| Error::Integrity(format!("{}: unknown scene {}", path.display(), header_only.scene_id)))?;
        let Some(css) = rankings.get(&scene.scene_id) else {
            log::warn!("no css from {agent_id} for scene {}; stack skipped", scene.scene_id);
            return Ok(None);
        };
        let stack = header_only.resampled(scene.width, scene.height);
        let raster = max_aggregate(&stack);
        let mut masks = Vec::with_capacity(css.object_ids.len());
        for id in &css.object_ids {
            let obj = scene
                .object(id)
                .ok_or_else(|| Error::Integrity(format!("scene {}: css object {id} not in manifest", scene.scene_id)))?;
            masks.push((id.clone(), scene.decode_object_mask(obj, &set.root)?));
        }
        let scores = object_scores(&raster, &scene.scene_id, stack.method.name(), &masks)?;
        Ok(Some(WhiteboxScene {
            method: stack.method,
            scene_id: scene.scene_id.clone(),
            n_objects: masks.len(),
            token_count: stack.token_count(),
            tau: compare_to_css(&scores, css)?,
            resampled_from: stack.declared.map(|(w, h)| format!("{w}x{h}")).unwrap_or_default(),
        }))
    });
    let mut scenes = Vec::new();
    for r in rows {
        if let Some(s) = r? {
            scenes.push(s);
        }
    }
    scenes.sort_by(|a, b| (a.method, &a.scene_id).cmp(&(b.method, &b.scene_id)));
    let mut by_method: BTreeMap<StackMethod, Vec<&WhiteboxScene>> = BTreeMap::new();
    for s in &scenes {
        by_method.entry(s.method).or_default().push(s);
    }
    let summaries = by_method
        .into_iter()
        .map(|(method, rows)| {
            let taus: Vec<f64> = rows.iter().filter_map(|r| r.tau).collect();
            WhiteboxSummary {
                method,
                agent_id: agent_id.into(),
                n_scenes: rows.len(),
                n_tau_undefined: rows.len() - taus.len(),
                tau_mean: (!taus.is_empty()).then(|| taus.iter().sum::<f64>() / taus.len() as f64),
            }
        })
        .collect();
    Ok(WhiteboxReport { scenes, summaries })
}
