//! Counterfactual semantic saliency: how far an agent's scene descriptions
//! move when one object is removed from the image.
//!
//! For description sets `D` (factual) and `D'` (counterfactual) with sentence
//! embeddings `E(.)`, the score is one minus the mean cosine similarity over
//! all `|D| * |D'|` cross pairs. Higher means the object mattered more.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{self, Gateway};
use crate::mask::BitMask;
use crate::raster::{Normalization, SaliencyRaster};
use crate::store::{DescriptionRecord, Record, Scene};
use crate::util::sig6;

/// `1 - mean_{j,k} cos(a_j, b_k)`.
///
/// Each cosine is `<a, b> / sqrt(|a|² |b|²)`, so a vector paired with an exact
/// copy of itself scores exactly 1 and sets of identical descriptions give
/// exactly 0.
pub fn css_score(factual: &[Vec<f64>], counterfactual: &[Vec<f64>]) -> Result<f64> {
    if factual.is_empty() || counterfactual.is_empty() {
        return Err(Error::Invalid("css needs at least one embedding on each side".into()));
    }
    let dim = factual[0].len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let sq_norms = |set: &[Vec<f64>]| -> Result<Vec<f64>> {
        set.iter()
            .map(|v| {
                if v.len() != dim {
                    return Err(Error::Invalid(format!("embedding dimension {} != {dim}", v.len())));
                }
                let n = dot(v, v);
                assert!(n > 0.0, "zero-norm embedding reached css_score");
                Ok(n)
            })
            .collect()
    };
    let (na, nb) = (sq_norms(factual)?, sq_norms(counterfactual)?);
    let mut total = 0.0;
    for (a, sa) in factual.iter().zip(&na) {
        for (b, sb) in counterfactual.iter().zip(&nb) {
            total += (dot(a, b) / (sa * sb).sqrt()).clamp(-1.0, 1.0);
        }
    }
    let mean_cos = total / (factual.len() * counterfactual.len()) as f64;
    Ok((1.0 - mean_cos).clamp(0.0, 2.0))
}

pub fn css_between(factual: &DescriptionRecord, counterfactual: &DescriptionRecord) -> Result<f64> {
    let missing = |r: &DescriptionRecord| Error::Invalid(format!("{} has no embeddings", r.record_id()));
    let f = factual.embeddings.as_ref().ok_or_else(|| missing(factual))?;
    let c = counterfactual.embeddings.as_ref().ok_or_else(|| missing(counterfactual))?;
    css_score(f, c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CssRecord {
    pub agent_id: String,
    pub scene_id: String,
    pub object_id: String,
    pub variant_id: String,
    #[serde(with = "sig6::opt")]
    pub css: Option<f64>,
    pub status: RecordStatus,
    pub n_factual: usize,
    pub n_counterfactual: usize,
    pub factual_ref: String,
    pub counterfactual_ref: String,
    pub error: Option<String>,
}

impl Record for CssRecord {
    const KIND: &'static str = "css";
    const COLUMNS: &'static [&'static str] = &[
        "agent_id",
        "scene_id",
        "object_id",
        "variant_id",
        "css",
        "status",
        "n_factual",
        "n_counterfactual",
        "factual_ref",
        "counterfactual_ref",
        "error",
    ];
}

impl CssRecord {
    pub fn ok(&self) -> Option<f64> {
        match self.status {
            RecordStatus::Ok => self.css,
            RecordStatus::Failed => None,
        }
    }
}

/// All outputs of scoring one scene for one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneScores {
    pub records: Vec<CssRecord>,
    pub descriptions: Vec<DescriptionRecord>,
}

fn describe_stimulus(gw: &Gateway, image_path: &Path, stimulus_id: &str, agent_id: &str) -> Result<DescriptionRecord> {
    let image = gateway::load_image(image_path)?;
    let d = gw.describe(&image)?;
    let embeddings = gw.embed(&d.texts)?;
    let record = DescriptionRecord {
        stimulus_id: stimulus_id.to_string(),
        agent_id: agent_id.to_string(),
        texts: d.texts,
        embeddings: Some(embeddings),
        sampling: d.sampling,
    };
    record.validate()?;
    Ok(record)
}

/// Descriptions of one scene's factual image and accepted variants, plus
/// the stimuli whose description failed, keyed by stimulus id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneDescriptions {
    pub records: Vec<DescriptionRecord>,
    pub failures: BTreeMap<String, String>,
}

pub fn describe_scene(scene: &Scene, root: &Path, gw: &Gateway, agent_id: &str) -> SceneDescriptions {
    let mut out = SceneDescriptions::default();
    let stimuli = std::iter::once((scene.scene_id.as_str(), &scene.image_path))
        .chain(scene.accepted_variants().map(|v| (v.variant_id.as_str(), &v.image_path)));
    for (id, path) in stimuli {
        match describe_stimulus(gw, &root.join(path), id, agent_id) {
            Ok(r) => out.records.push(r),
            Err(e) => {
                log::warn!("scene {}: describing {id} failed: {e}", scene.scene_id);
                out.failures.insert(id.to_string(), e.to_string());
            }
        }
    }
    out
}

/// One record per accepted variant from stored descriptions. A missing or
/// failed description yields a `Failed` record; a failed factual
/// description fails every variant.
pub fn score_scene(
    scene: &Scene,
    agent_id: &str,
    descriptions: &BTreeMap<String, DescriptionRecord>,
    failures: &BTreeMap<String, String>,
) -> Vec<CssRecord> {
    let factual_id = scene.scene_id.as_str();
    let why = |id: &str| failures.get(id).cloned().unwrap_or_else(|| format!("no description for {id}"));
    let factual = descriptions.get(factual_id);
    scene
        .accepted_variants()
        .map(|variant| {
            let base = CssRecord {
                agent_id: agent_id.to_string(),
                scene_id: scene.scene_id.clone(),
                object_id: variant.ablated_object_id.clone(),
                variant_id: variant.variant_id.clone(),
                css: None,
                status: RecordStatus::Failed,
                n_factual: 0,
                n_counterfactual: 0,
                factual_ref: format!("{agent_id}/{factual_id}"),
                counterfactual_ref: format!("{agent_id}/{}", variant.variant_id),
                error: None,
            };
            let Some(f) = factual else {
                return CssRecord { error: Some(format!("factual: {}", why(factual_id))), ..base };
            };
            let Some(cf) = descriptions.get(&variant.variant_id) else {
                return CssRecord { error: Some(why(&variant.variant_id)), ..base };
            };
            match css_between(f, cf) {
                Ok(css) => CssRecord {
                    css: Some(css),
                    status: RecordStatus::Ok,
                    n_factual: f.texts.len(),
                    n_counterfactual: cf.texts.len(),
                    ..base
                },
                Err(e) => CssRecord { error: Some(e.to_string()), ..base },
            }
        })
        .collect()
}

/// Describes and scores one scene in a single pass.
pub fn run_scene(scene: &Scene, root: &Path, gw: &Gateway, agent_id: &str) -> SceneScores {
    let d = describe_scene(scene, root, gw, agent_id);
    let by_id: BTreeMap<String, DescriptionRecord> =
        d.records.iter().map(|r| (r.stimulus_id.clone(), r.clone())).collect();
    SceneScores { records: score_scene(scene, agent_id, &by_id, &d.failures), descriptions: d.records }
}

/// Divisor used when painting a raster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RasterScale {
    PerScene,
    /// Maximum css over the whole dataset.
    Global(f64),
}

/// Paints each object's mask with its css divided by the scene (or dataset)
/// maximum. Overlapping masks keep the pixelwise maximum.
pub fn build_saliency_raster(
    dims: (u32, u32),
    masks: &BTreeMap<String, BitMask>,
    records: &[&CssRecord],
    scale: RasterScale,
) -> Result<SaliencyRaster> {
    let mut scored = Vec::new();
    for r in records {
        let mask = masks
            .get(&r.object_id)
            .ok_or_else(|| Error::Integrity(format!("css record for unknown object {:?}", r.object_id)))?;
        if mask.dims() != dims {
            return Err(Error::dims(dims, mask.dims()));
        }
        if let Some(css) = r.ok() {
            scored.push((mask, css));
        }
    }
    let (divisor, normalization) = match scale {
        RasterScale::PerScene => (scored.iter().map(|(_, c)| *c).fold(0.0, f64::max), Normalization::PerScene),
        RasterScale::Global(max) => (max, Normalization::Global),
    };
    let mut raster = SaliencyRaster::zeros(dims.0, dims.1);
    raster.normalization = normalization;
    if divisor <= 0.0 {
        return Ok(raster);
    }
    for (mask, css) in scored {
        let value = (css / divisor).clamp(0.0, 1.0);
        for (x, y) in mask.on_pixels() {
            if value > raster.get(x, y) {
                raster.set(x, y, value);
            }
        }
    }
    Ok(raster)
}

/// Legend written next to a rendered raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterLegend {
    pub scene_id: String,
    pub agent_id: String,
    pub normalization: Normalization,
    #[serde(with = "sig6")]
    pub divisor: f64,
    pub objects: Vec<LegendEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub object_id: String,
    pub label: String,
    #[serde(with = "sig6::opt")]
    pub css: Option<f64>,
    #[serde(with = "sig6::opt")]
    pub value: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let mut sum = 0.0;
        for x in a {
            for y in b {
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
                let ny = y.iter().map(|q| q * q).sum::<f64>().sqrt();
                sum += dot / (nx * ny);
            }
        }
        1.0 - sum / (a.len() * b.len()) as f64
    }

    #[test]
    fn boundary_values() {
        let e1 = vec![1.0, 0.0, 0.0];
        let e2 = vec![0.0, 1.0, 0.0];
        let same = vec![e1.clone(); 5];
        assert_eq!(css_score(&same, &same).unwrap(), 0.0);
        assert_eq!(css_score(&[e1.clone()], &[e2.clone()]).unwrap(), 1.0);
        assert_eq!(css_score(&[e1.clone()], &[e1.clone(), e2.clone()]).unwrap(), 0.5);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        assert!(css_score(&[vec![1.0, 0.0]], &[vec![1.0, 0.0, 0.0]]).is_err());
        assert!(css_score(&[], &[vec![1.0]]).is_err());
    }

    fn unit_vecs(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..n).prop_filter_map("zero", |vs| {
            vs.into_iter()
                .map(|v| {
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    (n > 1e-3).then(|| v.iter().map(|x| x / n).collect())
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn matches_oracle_and_is_symmetric(a in unit_vecs(6), b in unit_vecs(6)) {
            let s = css_score(&a, &b).unwrap();
            prop_assert!((s - oracle(&a, &b)).abs() < 1e-12);
            prop_assert!((s - css_score(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=2.0).contains(&s));
        }

        #[test]
        fn permutation_invariant(a in unit_vecs(6), b in unit_vecs(6), rot in 0usize..6) {
            let mut b2 = b.clone();
            let k = rot % b2.len();
            b2.rotate_left(k);
            prop_assert!((css_score(&a, &b).unwrap() - css_score(&a, &b2).unwrap()).abs() < 1e-12);
        }
    }

    fn rec(object: &str, css: f64) -> CssRecord {
        CssRecord {
            agent_id: "a".into(),
            scene_id: "s".into(),
            object_id: object.into(),
            variant_id: format!("v_{object}"),
            css: Some(css),
            status: RecordStatus::Ok,
            n_factual: 5,
            n_counterfactual: 5,
            factual_ref: String::new(),
            counterfactual_ref: String::new(),
            error: None,
        }
    }

    #[test]
    fn raster_per_scene_and_global() {
        let mut masks = BTreeMap::new();
        masks.insert("a".to_string(), BitMask::rect(10, 10, "a", 0, 0, 3, 3));
        masks.insert("b".to_string(), BitMask::rect(10, 10, "b", 5, 5, 3, 3));
        let (ra, rb) = (rec("a", 0.2), rec("b", 0.4));
        let r = build_saliency_raster((10, 10), &masks, &[&ra, &rb], RasterScale::PerScene).unwrap();
        assert_eq!(r.get(1, 1), 0.5);
        assert_eq!(r.get(6, 6), 1.0);
        assert_eq!(r.get(9, 0), 0.0);
        let g = build_saliency_raster((10, 10), &masks, &[&rb], RasterScale::Global(0.8)).unwrap();
        assert_eq!(g.get(6, 6), 0.5);

        let single = build_saliency_raster((10, 10), &masks, &[&ra], RasterScale::PerScene).unwrap();
        assert_eq!(single.get(0, 0), 1.0);
        assert_eq!(single.values.iter().filter(|&&v| v > 0.0).count(), 9);

        let ghost = rec("ghost", 0.1);
        assert!(build_saliency_raster((10, 10), &masks, &[&ghost], RasterScale::PerScene).is_err());
    }

    #[test]
    fn overlapping_masks_take_max() {
        let mut masks = BTreeMap::new();
        masks.insert("a".to_string(), BitMask::rect(6, 6, "a", 0, 0, 4, 4));
        masks.insert("b".to_string(), BitMask::rect(6, 6, "b", 2, 2, 4, 4));
        let (ra, rb) = (rec("a", 0.9), rec("b", 0.3));
        let r = build_saliency_raster((6, 6), &masks, &[&rb, &ra], RasterScale::PerScene).unwrap();
        assert_eq!(r.get(3, 3), 1.0);
        assert!((r.get(5, 5) - 1.0 / 3.0).abs() < 1e-12);
        let (x, y) = r.argmax();
        assert!(masks["a"].get(x, y));
    }
}
