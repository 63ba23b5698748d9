//! Agreement between an agent's object ranking and a reference ranking:
//! Top-1 critical-object accuracy and per-scene Kendall's tau-b.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corr::kendall_tau_b;
use crate::css::CssRecord;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::store::Record;
use crate::util::sig6;

pub const MIN_RANKED_OBJECTS: usize = 3;

/// One agent's css values for the objects of one scene, in scene object order.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRanking {
    pub scene_id: String,
    pub agent_id: String,
    pub object_ids: Vec<String>,
    pub css: Vec<f64>,
}

impl SceneRanking {
    pub fn new(scene_id: &str, agent_id: &str, entries: Vec<(String, f64)>) -> Result<Self> {
        let (object_ids, css): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = object_ids.iter().find(|o| !seen.insert(*o)) {
            return Err(Error::Integrity(format!("scene {scene_id}: object {dup} ranked twice")));
        }
        if let Some(bad) = css.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("scene {scene_id}: css {bad}")));
        }
        Ok(Self { scene_id: scene_id.into(), agent_id: agent_id.into(), object_ids, css })
    }

    /// Object ids by descending css; ties keep scene order.
    pub fn ordered(&self) -> Vec<&str> {
        let mut idx: Vec<usize> = (0..self.css.len()).collect();
        idx.sort_by(|&a, &b| self.css[b].total_cmp(&self.css[a]));
        idx.into_iter().map(|i| self.object_ids[i].as_str()).collect()
    }

    /// Index of the maximal css (lowest index on ties) and whether it was tied.
    pub fn argmax(&self) -> (usize, bool) {
        let mut best = 0;
        for (i, &v) in self.css.iter().enumerate() {
            if v > self.css[best] {
                best = i;
            }
        }
        let tied = self.css.iter().filter(|&&v| v == self.css[best]).count() > 1;
        (best, tied)
    }

    /// `other`'s css values rearranged into this ranking's object order.
    fn aligned(&self, other: &SceneRanking) -> Result<Vec<f64>> {
        let mismatch = || {
            Error::Invalid(format!(
                "scene {}: object sets of {} and {} differ",
                self.scene_id, self.agent_id, other.agent_id
            ))
        };
        if self.object_ids.len() != other.object_ids.len() {
            return Err(mismatch());
        }
        let pos: BTreeMap<&str, usize> = other.object_ids.iter().enumerate().map(|(i, o)| (o.as_str(), i)).collect();
        self.object_ids
            .iter()
            .map(|o| pos.get(o.as_str()).map(|&i| other.css[i]).ok_or_else(mismatch))
            .collect()
    }
}

/// Tau-b over the paired css values; `Ok(None)` when every value in one
/// ranking is tied.
pub fn kendall_tau(a: &SceneRanking, b: &SceneRanking) -> Result<Option<f64>> {
    let bv = a.aligned(b)?;
    Ok(kendall_tau_b(&a.css, &bv).ok())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Top1 {
    pub hit: bool,
    pub agent_tie: bool,
    pub truth_tie: bool,
}

pub fn top1(a: &SceneRanking, truth: &SceneRanking) -> Result<Top1> {
    a.aligned(truth)?;
    let (ia, agent_tie) = a.argmax();
    let (it, truth_tie) = truth.argmax();
    Ok(Top1 { hit: a.object_ids[ia] == truth.object_ids[it], agent_tie, truth_tie })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAlignment {
    pub agent_id: String,
    pub truth_id: String,
    pub scene_id: String,
    pub n_objects: usize,
    #[serde(with = "sig6::opt")]
    pub tau: Option<f64>,
    pub top1: bool,
    pub agent_top: String,
    pub truth_top: String,
    pub agent_tie: bool,
    pub truth_tie: bool,
}

impl Record for SceneAlignment {
    const KIND: &'static str = "alignment-scenes";
    const COLUMNS: &'static [&'static str] = &[
        "agent_id",
        "truth_id",
        "scene_id",
        "n_objects",
        "tau",
        "top1",
        "agent_top",
        "truth_top",
        "agent_tie",
        "truth_tie",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub scene_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub agent_id: String,
    pub truth_id: String,
    pub n_scenes: usize,
    #[serde(with = "sig6")]
    pub top1_accuracy: f64,
    #[serde(with = "sig6::opt")]
    pub tau_mean: Option<f64>,
    /// Scenes whose tau was undefined (all css tied on one side).
    pub n_tau_undefined: usize,
    pub n_argmax_ties: usize,
    pub excluded: Vec<Exclusion>,
    pub scenes: Vec<SceneAlignment>,
}

/// Summary row for tabular export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub agent_id: String,
    pub truth_id: String,
    pub n_scenes: usize,
    #[serde(with = "sig6")]
    pub top1_accuracy: f64,
    #[serde(with = "sig6::opt")]
    pub tau_mean: Option<f64>,
    pub n_tau_undefined: usize,
    pub n_argmax_ties: usize,
    pub n_excluded: usize,
}

impl Record for AlignmentSummary {
    const KIND: &'static str = "alignment";
    const COLUMNS: &'static [&'static str] = &[
        "agent_id",
        "truth_id",
        "n_scenes",
        "top1_accuracy",
        "tau_mean",
        "n_tau_undefined",
        "n_argmax_ties",
        "n_excluded",
    ];
}

impl AlignmentReport {
    pub fn summary(&self) -> AlignmentSummary {
        AlignmentSummary {
            agent_id: self.agent_id.clone(),
            truth_id: self.truth_id.clone(),
            n_scenes: self.n_scenes,
            top1_accuracy: self.top1_accuracy,
            tau_mean: self.tau_mean,
            n_tau_undefined: self.n_tau_undefined,
            n_argmax_ties: self.n_argmax_ties,
            n_excluded: self.excluded.len(),
        }
    }

    pub fn taus(&self) -> Vec<f64> {
        self.scenes.iter().filter_map(|s| s.tau).collect()
    }
}

/// Groups successful records into rankings keyed by scene, preserving the
/// record order of objects within a scene.
pub fn rankings_by_scene(records: &[CssRecord]) -> Result<BTreeMap<String, SceneRanking>> {
    let mut grouped: BTreeMap<(String, String), Vec<(String, f64)>> = BTreeMap::new();
    for r in records {
        if let Some(css) = r.ok() {
            grouped.entry((r.scene_id.clone(), r.agent_id.clone())).or_default().push((r.object_id.clone(), css));
        }
    }
    let mut out = BTreeMap::new();
    for ((scene, agent), entries) in grouped {
        if out.contains_key(&scene) {
            return Err(Error::Invalid(format!("scene {scene} has records from more than one agent")));
        }
        out.insert(scene.clone(), SceneRanking::new(&scene, &agent, entries)?);
    }
    Ok(out)
}

fn agent_of(records: &[CssRecord]) -> String {
    records.first().map(|r| r.agent_id.clone()).unwrap_or_default()
}

/// Per-scene Top-1 and tau over the scenes both record sets cover. Scenes
/// present on one side only, with differing object sets, or with fewer than
/// three ranked objects are excluded and listed.
pub fn evaluate_agent(agent_records: &[CssRecord], truth_records: &[CssRecord], exec: Execution) -> Result<AlignmentReport> {
    let agent = rankings_by_scene(agent_records)?;
    let truth = rankings_by_scene(truth_records)?;
    let agent_id = agent_of(agent_records);
    let truth_id = agent_of(truth_records);
    let mut excluded = Vec::new();
    let mut pairs = Vec::new();
    let scene_ids: std::collections::BTreeSet<&String> = agent.keys().chain(truth.keys()).collect();
    for sid in scene_ids {
        match (agent.get(sid), truth.get(sid)) {
            (Some(a), Some(t)) => {
                if a.object_ids.len() < MIN_RANKED_OBJECTS || t.object_ids.len() < MIN_RANKED_OBJECTS {
                    excluded.push(Exclusion { scene_id: sid.clone(), reason: "fewer than 3 ranked objects".into() });
                } else if a.aligned(t).is_err() {
                    excluded.push(Exclusion { scene_id: sid.clone(), reason: "object sets differ".into() });
                } else {
                    pairs.push((a, t));
                }
            }
            (Some(_), None) => excluded.push(Exclusion { scene_id: sid.clone(), reason: "missing from truth".into() }),
            (None, _) => excluded.push(Exclusion { scene_id: sid.clone(), reason: "missing from agent".into() }),
        }
    }
    if !excluded.is_empty() {
        log::warn!("{agent_id} vs {truth_id}: {} scenes excluded", excluded.len());
    }
    let scenes: Vec<SceneAlignment> = exec
        .map_slice(&pairs, |(a, t)| {
            let hit = top1(a, t).expect("aligned above");
            let tau = kendall_tau(a, t).expect("aligned above");
            SceneAlignment {
                agent_id: agent_id.clone(),
                truth_id: truth_id.clone(),
                scene_id: a.scene_id.clone(),
                n_objects: a.object_ids.len(),
                tau,
                top1: hit.hit,
                agent_top: a.object_ids[a.argmax().0].clone(),
                truth_top: t.object_ids[t.argmax().0].clone(),
                agent_tie: hit.agent_tie,
                truth_tie: hit.truth_tie,
            }
        });
    let n = scenes.len();
    let top1_accuracy = if n == 0 { 0.0 } else { scenes.iter().filter(|s| s.top1).count() as f64 / n as f64 };
    let taus: Vec<f64> = scenes.iter().filter_map(|s| s.tau).collect();
    let tau_mean = (!taus.is_empty()).then(|| taus.iter().sum::<f64>() / taus.len() as f64);
    Ok(AlignmentReport {
        agent_id,
        truth_id,
        n_scenes: n,
        top1_accuracy,
        tau_mean,
        n_tau_undefined: n - taus.len(),
        n_argmax_ties: scenes.iter().filter(|s| s.agent_tie || s.truth_tie).count(),
        excluded,
        scenes,
    })
}
