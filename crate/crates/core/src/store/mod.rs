//! Dataset persistence: scene manifests, mask references, description records
//! and the record-file layer shared by every stage.
//!
//! A manifest is a single JSON document listing scenes inline. Paths inside it
//! are relative to the dataset root (the manifest's directory unless
//! overridden).

pub mod codec;
pub mod records;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BitMask;
pub use codec::Rle;
pub use records::{read_records, write_records, Format, Record};

pub const MIN_VARIANTS: usize = 3;
pub const MAX_VARIANTS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRef {
    /// 1-bit PBM raster, relative to the dataset root.
    Path(PathBuf),
    Rle(Rle),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRef {
    pub object_id: String,
    pub label: String,
    pub mask: MaskRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vote {
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidationStatus {
    Accepted,
    Rejected,
    Pending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    #[serde(default)]
    pub annotator_votes: Vec<Vote>,
    pub status: ValidationStatus,
    /// Outcome of the manual review that resolves "no" votes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manual_review: Option<ValidationStatus>,
}

impl Validation {
    pub fn accepted() -> Self {
        Self {
            annotator_votes: Vec::new(),
            status: ValidationStatus::Accepted,
            manual_review: None,
        }
    }

    pub fn pending() -> Self {
        Self {
            annotator_votes: Vec::new(),
            status: ValidationStatus::Pending,
            manual_review: None,
        }
    }

    /// Status after applying the vote rule: any "no" keeps the variant
    /// pending until a manual review decides it.
    pub fn effective_status(&self) -> ValidationStatus {
        if self.status == ValidationStatus::Rejected {
            return ValidationStatus::Rejected;
        }
        if self.annotator_votes.contains(&Vote::No) {
            return match self.manual_review {
                Some(ValidationStatus::Accepted) => ValidationStatus::Accepted,
                Some(ValidationStatus::Rejected) => ValidationStatus::Rejected,
                _ => ValidationStatus::Pending,
            };
        }
        self.status
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRef {
    pub variant_id: String,
    pub ablated_object_id: String,
    pub image_path: PathBuf,
    pub validation: Validation,
}

impl VariantRef {
    pub fn is_accepted(&self) -> bool {
        self.validation.effective_status() == ValidationStatus::Accepted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<ObjectRef>,
    pub variants: Vec<VariantRef>,
}

impl Scene {
    pub fn object(&self, object_id: &str) -> Option<&ObjectRef> {
        self.objects.iter().find(|o| o.object_id == object_id)
    }

    pub fn object_index(&self, object_id: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.object_id == object_id)
    }

    /// Accepted variants only; rejected and pending ones never leave the store.
    pub fn accepted_variants(&self) -> impl Iterator<Item = &VariantRef> {
        self.variants.iter().filter(|v| v.is_accepted())
    }

    pub fn decode_object_mask(&self, object: &ObjectRef, root: &Path) -> Result<BitMask> {
        let mask = decode_mask(&object.mask, root, &object.label)?;
        if mask.dims() != (self.width, self.height) {
            return Err(Error::dims((self.width, self.height), mask.dims()));
        }
        Ok(mask)
    }
}

/// Decodes a mask reference into a bit-exact raster.
pub fn decode_mask(mask: &MaskRef, root: &Path, label: &str) -> Result<BitMask> {
    match mask {
        MaskRef::Rle(rle) => rle.decode(label),
        MaskRef::Path(p) => codec::read_pbm(&root.join(p), label),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub dataset: String,
    pub scenes: Vec<Scene>,
}

fn default_version() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneFlag {
    /// Accepted-variant count outside `[MIN_VARIANTS, MAX_VARIANTS]`.
    VariantBound { scene_id: String, accepted: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSet {
    pub root: PathBuf,
    pub dataset: String,
    pub scenes: Vec<Scene>,
    pub flags: Vec<SceneFlag>,
}

impl SceneSet {
    pub fn new(root: impl Into<PathBuf>, dataset: impl Into<String>, scenes: Vec<Scene>) -> Result<Self> {
        let manifest = Manifest {
            version: 1,
            dataset: dataset.into(),
            scenes,
        };
        Self::from_manifest(manifest, root.into())
    }

    fn from_manifest(manifest: Manifest, root: PathBuf) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut flags = Vec::new();
        for scene in &manifest.scenes {
            if !seen.insert(scene.scene_id.as_str()) {
                return Err(Error::Integrity(format!("duplicate scene_id {:?}", scene.scene_id)));
            }
            let mut object_ids = HashSet::new();
            for o in &scene.objects {
                if o.label.trim().is_empty() {
                    return Err(Error::Integrity(format!(
                        "scene {:?}: object {:?} has an empty label",
                        scene.scene_id, o.object_id
                    )));
                }
                if !object_ids.insert(o.object_id.as_str()) {
                    return Err(Error::Integrity(format!(
                        "scene {:?}: duplicate object_id {:?}",
                        scene.scene_id, o.object_id
                    )));
                }
            }
            for v in &scene.variants {
                if !object_ids.contains(v.ablated_object_id.as_str()) {
                    return Err(Error::Integrity(format!(
                        "scene {:?}: variant {:?} ablates unknown object {:?}",
                        scene.scene_id, v.variant_id, v.ablated_object_id
                    )));
                }
            }
            let accepted = scene.accepted_variants().count();
            if !(MIN_VARIANTS..=MAX_VARIANTS).contains(&accepted) {
                flags.push(SceneFlag::VariantBound {
                    scene_id: scene.scene_id.clone(),
                    accepted,
                });
            }
        }
        Ok(SceneSet {
            root,
            dataset: manifest.dataset,
            scenes: manifest.scenes,
            flags,
        })
    }

    pub fn scene(&self, scene_id: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.scene_id == scene_id)
    }

    pub fn is_flagged(&self, scene_id: &str) -> bool {
        self.flags.iter().any(|f| match f {
            SceneFlag::VariantBound { scene_id: s, .. } => s == scene_id,
        })
    }

    /// Scenes satisfying the variant bound, i.e. the benchmark set.
    pub fn admitted(&self) -> impl Iterator<Item = &Scene> {
        self.scenes.iter().filter(|s| !self.is_flagged(&s.scene_id))
    }

    pub fn total_variants(&self) -> usize {
        self.scenes.iter().map(|s| s.variants.len()).sum()
    }

    pub fn to_manifest(&self) -> Manifest {
        Manifest {
            version: 1,
            dataset: self.dataset.clone(),
            scenes: self.scenes.clone(),
        }
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }
}

pub fn parse_manifest(text: &str, location: &str, root: PathBuf) -> Result<SceneSet> {
    let manifest: Manifest = serde_json::from_str(text).map_err(|e| {
        Error::parse(format!("{location}:{}:{}", e.line(), e.column()), e)
    })?;
    SceneSet::from_manifest(manifest, root)
}

/// Loads a manifest; the dataset root defaults to the manifest's directory.
pub fn load_manifest(path: &Path, root: Option<&Path>) -> Result<SceneSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = match root {
        Some(r) => r.to_path_buf(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    parse_manifest(&text, &path.display().to_string(), root)
}

pub fn save_manifest(set: &SceneSet, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(&set.to_manifest())
        .map_err(|e| Error::Invalid(format!("serializing manifest: {e}")))?;
    bytes.push(b'\n');
    records::write_atomic(path, &bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub n_samples: usize,
    pub deterministic: bool,
}

/// Sampled texts for one (agent, stimulus), optionally with unit-norm embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionRecord {
    pub stimulus_id: String,
    pub agent_id: String,
    pub texts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<Vec<Vec<f64>>>,
    pub sampling: Sampling,
}

impl DescriptionRecord {
    pub fn record_id(&self) -> String {
        format!("{}/{}", self.agent_id, self.stimulus_id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.texts.is_empty() {
            return Err(Error::Invalid(format!("{}: no texts", self.record_id())));
        }
        if let Some(emb) = &self.embeddings {
            if emb.len() != self.texts.len() {
                return Err(Error::Invalid(format!(
                    "{}: {} embeddings for {} texts",
                    self.record_id(),
                    emb.len(),
                    self.texts.len()
                )));
            }
            let dim = emb.first().map_or(0, Vec::len);
            for v in emb {
                if v.len() != dim {
                    return Err(Error::Invalid(format!("{}: ragged embeddings", self.record_id())));
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::Invalid(format!(
                        "{}: embedding norm {norm} is not 1",
                        self.record_id()
                    )));
                }
            }
        }
        Ok(())
    }
}

impl Record for DescriptionRecord {
    const KIND: &'static str = "descriptions";
    const COLUMNS: &'static [&'static str] = &[];
}

/// One annotator judgement on a variant, as ingested from a validation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationVote {
    pub variant_id: String,
    pub annotator_id: String,
    pub vote: Vote,
}

impl Record for ValidationVote {
    const KIND: &'static str = "validation_votes";
    const COLUMNS: &'static [&'static str] = &["variant_id", "annotator_id", "vote"];
}

/// Manual-review outcome for a variant that received a "no" vote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub variant_id: String,
    pub decision: ValidationStatus,
}

impl Record for ReviewDecision {
    const KIND: &'static str = "manual_reviews";
    const COLUMNS: &'static [&'static str] = &["variant_id", "decision"];
}

/// Folds annotator votes and review decisions into the manifest's variants and
/// recomputes each variant's status and the scene flags.
pub fn apply_validation(set: &SceneSet, votes: &[ValidationVote], reviews: &[ReviewDecision]) -> Result<SceneSet> {
    let mut by_variant: BTreeMap<&str, Vec<Vote>> = BTreeMap::new();
    for v in votes {
        by_variant.entry(v.variant_id.as_str()).or_default().push(v.vote);
    }
    let review: BTreeMap<&str, ValidationStatus> =
        reviews.iter().map(|r| (r.variant_id.as_str(), r.decision)).collect();
    let known: HashSet<&str> = set
        .scenes
        .iter()
        .flat_map(|s| s.variants.iter().map(|v| v.variant_id.as_str()))
        .collect();
    for id in by_variant.keys().chain(review.keys()) {
        if !known.contains(id) {
            return Err(Error::Integrity(format!("validation record for unknown variant {id:?}")));
        }
    }
    let mut scenes = set.scenes.clone();
    for scene in &mut scenes {
        for variant in &mut scene.variants {
            if let Some(v) = by_variant.get(variant.variant_id.as_str()) {
                variant.validation.annotator_votes = v.clone();
            }
            if let Some(&d) = review.get(variant.variant_id.as_str()) {
                variant.validation.manual_review = Some(d);
            }
            let votes = &variant.validation.annotator_votes;
            if !votes.is_empty() || variant.validation.manual_review.is_some() {
                variant.validation.status = if votes.contains(&Vote::No) {
                    match variant.validation.manual_review {
                        Some(s @ (ValidationStatus::Accepted | ValidationStatus::Rejected)) => s,
                        _ => ValidationStatus::Pending,
                    }
                } else {
                    ValidationStatus::Accepted
                };
            }
        }
    }
    SceneSet::new(set.root.clone(), set.dataset.clone(), scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(id: &str, n_variants: usize) -> Scene {
        let objects = (0..n_variants.max(1))
            .map(|i| ObjectRef {
                object_id: format!("o{i}"),
                label: format!("thing {i}"),
                mask: MaskRef::Rle(Rle { width: 4, height: 4, counts: vec![i as u32, 1, 15 - i as u32] }),
            })
            .collect();
        let variants = (0..n_variants)
            .map(|i| VariantRef {
                variant_id: format!("{id}_v{i}"),
                ablated_object_id: format!("o{i}"),
                image_path: format!("{id}_v{i}.png").into(),
                validation: Validation::accepted(),
            })
            .collect();
        Scene {
            scene_id: id.into(),
            image_path: format!("{id}.png").into(),
            width: 4,
            height: 4,
            objects,
            variants,
        }
    }

    fn manifest_text(scenes: Vec<Scene>) -> String {
        serde_json::to_string(&Manifest { version: 1, dataset: "t".into(), scenes }).unwrap()
    }

    #[test]
    fn minimal_manifest_has_no_flags() {
        let set = parse_manifest(&manifest_text(vec![scene("a", 3)]), "m", PathBuf::new()).unwrap();
        assert_eq!(set.scenes.len(), 1);
        assert!(set.flags.is_empty());
    }

    #[test]
    fn two_variants_flagged_not_dropped() {
        let set = parse_manifest(&manifest_text(vec![scene("a", 2)]), "m", PathBuf::new()).unwrap();
        assert_eq!(set.scenes.len(), 1);
        assert_eq!(set.flags, vec![SceneFlag::VariantBound { scene_id: "a".into(), accepted: 2 }]);
        assert_eq!(set.admitted().count(), 0);
    }

    #[test]
    fn composition_counts() {
        let mut scenes = Vec::new();
        for (count, n) in [(98, 3), (87, 4), (68, 5), (54, 6)] {
            for i in 0..count {
                scenes.push(scene(&format!("s{n}_{i}"), n));
            }
        }
        let set = parse_manifest(&manifest_text(scenes), "m", PathBuf::new()).unwrap();
        assert_eq!(set.scenes.len(), 307);
        assert_eq!(set.total_variants(), 1306);
        assert!(set.flags.is_empty());
    }

    #[test]
    fn dangling_object_is_integrity_error() {
        let mut s = scene("a", 3);
        s.variants[1].ablated_object_id = "ghost".into();
        let err = parse_manifest(&manifest_text(vec![s]), "m", PathBuf::new()).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn malformed_manifest_reports_line() {
        let err = parse_manifest("{\n  \"scenes\": [\n    {\"scene_id\": 3}\n  ]\n}", "m.json", PathBuf::new())
            .unwrap_err();
        match err {
            Error::Parse { location, .. } => assert!(location.starts_with("m.json:3:"), "{location}"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn rejected_variants_excluded() {
        let mut s = scene("a", 4);
        s.variants[0].validation.status = ValidationStatus::Rejected;
        assert_eq!(s.accepted_variants().count(), 3);
    }

    #[test]
    fn no_vote_needs_review() {
        let set = SceneSet::new("", "t", vec![scene("a", 4)]).unwrap();
        let votes = vec![
            ValidationVote { variant_id: "a_v0".into(), annotator_id: "x".into(), vote: Vote::Yes },
            ValidationVote { variant_id: "a_v0".into(), annotator_id: "y".into(), vote: Vote::No },
            ValidationVote { variant_id: "a_v1".into(), annotator_id: "x".into(), vote: Vote::No },
        ];
        let reviewed = vec![ReviewDecision { variant_id: "a_v1".into(), decision: ValidationStatus::Rejected }];
        let out = apply_validation(&set, &votes, &reviewed).unwrap();
        let s = &out.scenes[0];
        assert_eq!(s.variants[0].validation.effective_status(), ValidationStatus::Pending);
        assert_eq!(s.variants[1].validation.effective_status(), ValidationStatus::Rejected);
        assert_eq!(s.accepted_variants().count(), 2);
        assert_eq!(out.flags.len(), 1);

        let bad = vec![ValidationVote { variant_id: "zz".into(), annotator_id: "x".into(), vote: Vote::Yes }];
        assert!(apply_validation(&set, &bad, &[]).is_err());
    }

    #[test]
    fn description_record_validation() {
        let mut r = DescriptionRecord {
            stimulus_id: "s".into(),
            agent_id: "a".into(),
            texts: vec!["x".into(), "y".into()],
            embeddings: Some(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
            sampling: Sampling { temperature: 1.0, n_samples: 2, deterministic: false },
        };
        r.validate().unwrap();
        r.embeddings = Some(vec![vec![1.0, 0.0]]);
        assert!(r.validate().is_err());
        r.embeddings = Some(vec![vec![2.0, 0.0], vec![0.0, 1.0]]);
        assert!(r.validate().is_err());
        r.texts.clear();
        assert!(r.validate().is_err());
    }
}
