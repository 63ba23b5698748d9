//! Object attributes (size, centeredness, low-level saliency, person) and
//! their correlation with css across all counterfactual items.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corr::{CorrKind, CorrResult};
use crate::css::CssRecord;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gateway::load_image;
use crate::gbvs::{self, GbvsConfig};
use crate::mask::BitMask;
use crate::store::{Record, Scene, SceneSet};
use crate::util::sig6;

pub const DEFAULT_PERSON_WORDS: &[&str] = &[
    "person", "persons", "people", "man", "men", "woman", "women", "boy", "boys", "girl", "girls", "child",
    "children", "kid", "kids", "lady", "ladies", "guy", "guys", "baby", "toddler", "teenager", "adult", "human",
    "humans", "gentleman", "pedestrian", "player", "rider", "skier", "surfer", "worker",
];

/// Word-boundary lexicon match on object labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonLexicon {
    pub words: Vec<String>,
}

impl Default for PersonLexicon {
    fn default() -> Self {
        Self { words: DEFAULT_PERSON_WORDS.iter().map(|w| w.to_string()).collect() }
    }
}

impl PersonLexicon {
    pub fn is_person(&self, label: &str) -> bool {
        label
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .any(|t| self.words.iter().any(|w| w.eq_ignore_ascii_case(t)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Size,
    Center,
    Lowlevel,
    Person,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [Attribute::Size, Attribute::Center, Attribute::Lowlevel, Attribute::Person];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Size => "size",
            Attribute::Center => "center",
            Attribute::Lowlevel => "lowlevel",
            Attribute::Person => "person",
        }
    }

    pub fn corr_kind(self) -> CorrKind {
        match self {
            Attribute::Person => CorrKind::PointBiserial,
            _ => CorrKind::Spearman,
        }
    }

    pub fn value(self, row: &AttributeRow) -> f64 {
        match self {
            Attribute::Size => row.size as f64,
            Attribute::Center => row.centeredness,
            Attribute::Lowlevel => row.lowlevel,
            Attribute::Person => row.person as u8 as f64,
        }
    }
}

impl std::str::FromStr for Attribute {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown attribute {s:?} (size, center, lowlevel, person)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRow {
    pub scene_id: String,
    pub object_id: String,
    pub label: String,
    pub size: usize,
    #[serde(with = "sig6")]
    pub centeredness: f64,
    #[serde(with = "sig6")]
    pub lowlevel: f64,
    pub person: bool,
    pub gbvs_hash: String,
}

impl Record for AttributeRow {
    const KIND: &'static str = "attributes";
    const COLUMNS: &'static [&'static str] =
        &["scene_id", "object_id", "label", "size", "centeredness", "lowlevel", "person", "gbvs_hash"];
}

/// Negative distance from the mask centroid to the image center, in pixels.
pub fn centeredness(mask: &BitMask) -> f64 {
    let (cx, cy) = mask.centroid().expect("centeredness of an empty mask");
    let (ix, iy) = ((mask.width() as f64 - 1.0) / 2.0, (mask.height() as f64 - 1.0) / 2.0);
    -((cx - ix).powi(2) + (cy - iy).powi(2)).sqrt()
}

/// Rows for the accepted variants of one scene, scored on its GBVS raster.
pub fn scene_attributes(
    scene: &Scene,
    root: &std::path::Path,
    gbvs_cfg: &GbvsConfig,
    lexicon: &PersonLexicon,
    exec: Execution,
) -> Result<Vec<AttributeRow>> {
    let image = load_image(&root.join(&scene.image_path))?;
    let saliency = gbvs::gbvs(&image, gbvs_cfg, exec).raster;
    let hash = gbvs_cfg.hash();
    scene
        .accepted_variants()
        .map(|v| {
            let obj = scene.object(&v.ablated_object_id).ok_or_else(|| {
                Error::Integrity(format!("variant {} ablates unknown object {}", v.variant_id, v.ablated_object_id))
            })?;
            let mask = scene.decode_object_mask(obj, root)?;
            assert!(!mask.is_empty(), "empty mask survived preprocessing: {}", obj.object_id);
            Ok(AttributeRow {
                scene_id: scene.scene_id.clone(),
                object_id: obj.object_id.clone(),
                label: obj.label.clone(),
                size: mask.area(),
                centeredness: centeredness(&mask),
                lowlevel: gbvs::max_in_mask(&saliency, &mask)?,
                person: lexicon.is_person(&obj.label),
                gbvs_hash: hash.clone(),
            })
        })
        .collect()
}

/// One row per accepted variant over every admitted scene.
pub fn extract_attributes(
    set: &SceneSet,
    gbvs_cfg: &GbvsConfig,
    lexicon: &PersonLexicon,
    exec: Execution,
) -> Result<Vec<AttributeRow>> {
    let scenes: Vec<&Scene> = set.admitted().collect();
    let per_scene = exec.map_slice(&scenes, |s| scene_attributes(s, &set.root, gbvs_cfg, lexicon, Execution::Sequential));
    let mut rows = Vec::new();
    for r in per_scene {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Attribute rows paired with an agent's css, keyed by (scene, object).
#[derive(Debug, Clone, PartialEq)]
pub struct JoinedItems {
    pub agent_id: String,
    pub rows: Vec<AttributeRow>,
    pub css: Vec<f64>,
}

impl JoinedItems {
    pub fn attribute(&self, a: Attribute) -> Vec<f64> {
        self.rows.iter().map(|r| a.value(r)).collect()
    }

    pub fn len(&self) -> usize {
        self.css.len()
    }

    pub fn is_empty(&self) -> bool {
        self.css.is_empty()
    }
}

pub fn join(records: &[CssRecord], attributes: &[AttributeRow]) -> JoinedItems {
    let css: BTreeMap<(&str, &str), f64> = records
        .iter()
        .filter_map(|r| r.ok().map(|v| ((r.scene_id.as_str(), r.object_id.as_str()), v)))
        .collect();
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for a in attributes {
        if let Some(&v) = css.get(&(a.scene_id.as_str(), a.object_id.as_str())) {
            rows.push(a.clone());
            values.push(v);
        }
    }
    JoinedItems { agent_id: records.first().map(|r| r.agent_id.clone()).unwrap_or_default(), rows, css: values }
}

/// Pairs two agents' items on the (scene, object) keys both cover, in
/// attribute-table order.
pub fn pair_items(model: &JoinedItems, human: &JoinedItems) -> (JoinedItems, JoinedItems) {
    let hkey: BTreeMap<(&str, &str), usize> =
        human.rows.iter().enumerate().map(|(i, r)| ((r.scene_id.as_str(), r.object_id.as_str()), i)).collect();
    let (mut mr, mut mc, mut hr, mut hc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, r) in model.rows.iter().enumerate() {
        if let Some(&j) = hkey.get(&(r.scene_id.as_str(), r.object_id.as_str())) {
            mr.push(r.clone());
            mc.push(model.css[i]);
            hr.push(human.rows[j].clone());
            hc.push(human.css[j]);
        }
    }
    (
        JoinedItems { agent_id: model.agent_id.clone(), rows: mr, css: mc },
        JoinedItems { agent_id: human.agent_id.clone(), rows: hr, css: hc },
    )
}

pub fn correlation(items: &JoinedItems, a: Attribute) -> CorrResult {
    a.corr_kind().compute(&items.attribute(a), &items.css)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasProfile {
    pub agent_id: String,
    pub n_items: usize,
    #[serde(with = "sig6::opt")]
    pub r_size: Option<f64>,
    #[serde(with = "sig6::opt")]
    pub r_center: Option<f64>,
    #[serde(with = "sig6::opt")]
    pub r_lowlevel: Option<f64>,
    #[serde(with = "sig6::opt")]
    pub r_person: Option<f64>,
}

impl Record for BiasProfile {
    const KIND: &'static str = "bias_profiles";
    const COLUMNS: &'static [&'static str] = &["agent_id", "n_items", "r_size", "r_center", "r_lowlevel", "r_person"];
}

impl BiasProfile {
    pub fn get(&self, a: Attribute) -> Option<f64> {
        match a {
            Attribute::Size => self.r_size,
            Attribute::Center => self.r_center,
            Attribute::Lowlevel => self.r_lowlevel,
            Attribute::Person => self.r_person,
        }
    }
}

/// The four correlations over the joined items; undefined correlations are
/// logged and left empty.
pub fn bias_profile(records: &[CssRecord], attributes: &[AttributeRow]) -> Result<BiasProfile> {
    let items = join(records, attributes);
    if items.len() < 3 {
        return Err(Error::Invalid(format!("{}: only {} items join the attribute table", items.agent_id, items.len())));
    }
    let r = |a: Attribute| match correlation(&items, a) {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("{}: r_{}: {e}", items.agent_id, a.name());
            None
        }
    };
    Ok(BiasProfile {
        agent_id: items.agent_id.clone(),
        n_items: items.len(),
        r_size: r(Attribute::Size),
        r_center: r(Attribute::Center),
        r_lowlevel: r(Attribute::Lowlevel),
        r_person: r(Attribute::Person),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::css::RecordStatus;

    #[test]
    fn person_lexicon_uses_word_boundaries() {
        let lex = PersonLexicon::default();
        assert!(lex.is_person("man in black"));
        assert!(lex.is_person("Young WOMAN"));
        assert!(!lex.is_person("fishing rod"));
        assert!(!lex.is_person("manhole cover"));
    }

    #[test]
    fn centeredness_examples() {
        let centered = BitMask::rect(100, 100, "a", 45, 45, 10, 10);
        assert_eq!(centered.area(), 100);
        assert_eq!(centeredness(&centered), 0.0);
        let left = BitMask::rect(100, 100, "a", 5, 45, 10, 10);
        assert_eq!(centeredness(&left), -40.0);
    }

    fn row(i: usize, size: usize, person: bool) -> AttributeRow {
        AttributeRow {
            scene_id: format!("s{}", i / 3),
            object_id: format!("o{i}"),
            label: String::new(),
            size,
            centeredness: -(i as f64),
            lowlevel: (i % 4) as f64 / 4.0,
            person,
            gbvs_hash: "h".into(),
        }
    }

    fn rec(r: &AttributeRow, css: f64) -> CssRecord {
        CssRecord {
            agent_id: "m".into(),
            scene_id: r.scene_id.clone(),
            object_id: r.object_id.clone(),
            variant_id: String::new(),
            css: Some(css),
            status: RecordStatus::Ok,
            n_factual: 1,
            n_counterfactual: 1,
            factual_ref: String::new(),
            counterfactual_ref: String::new(),
            error: None,
        }
    }

    #[test]
    fn css_equal_to_size_gives_unit_r() {
        let rows: Vec<_> = (0..12).map(|i| row(i, 10 + i * 3, i % 2 == 0)).collect();
        let records: Vec<_> = rows.iter().map(|r| rec(r, r.size as f64 / 100.0)).collect();
        let p = bias_profile(&records, &rows).unwrap();
        assert_eq!(p.r_size, Some(1.0));
        assert_eq!(p.r_center, Some(-1.0));
        assert_eq!(p.n_items, 12);
        assert!(p.r_person.is_some());
    }

    #[test]
    fn single_class_person_is_undefined() {
        let rows: Vec<_> = (0..6).map(|i| row(i, 10 + i, false)).collect();
        let records: Vec<_> = rows.iter().map(|r| rec(r, r.size as f64)).collect();
        assert_eq!(bias_profile(&records, &rows).unwrap().r_person, None);
        assert!(bias_profile(&records[..2], &rows).is_err());
    }

    #[test]
    fn attribute_names_round_trip() {
        for a in Attribute::ALL {
            assert_eq!(a.name().parse::<Attribute>().unwrap(), a);
        }
    }
}
