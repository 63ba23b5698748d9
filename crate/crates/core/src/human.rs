//! Human-side protocol: response quality filtering, the fixed five-response
//! consensus split, ground-truth css, and between-subjects study routing.
//!
//! Stimulus ids follow the scorer's convention: a factual image is keyed by
//! its scene id, a counterfactual by its variant id.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::css::{css_score, CssRecord, RecordStatus};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gateway::Gateway;
use crate::store::{Record, Scene, MAX_VARIANTS, MIN_VARIANTS};
use crate::util::{derive_seed, replicate_rng};

pub const DEFAULT_FILTER_THRESHOLD: f64 = 0.5;
pub const TRUTH_SIZE: usize = 5;
pub const DEFAULT_PARTICIPANTS_PER_SET: usize = 10;

/// One row of the participant response table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanResponse {
    pub participant_id: String,
    pub stimulus_id: String,
    pub text: String,
}

impl Record for HumanResponse {
    const KIND: &'static str = "responses";
    const COLUMNS: &'static [&'static str] = &["participant_id", "stimulus_id", "text"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledResponse {
    pub participant_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default = "yes")]
    pub kept: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponsePool {
    pub stimulus_id: String,
    pub responses: Vec<PooledResponse>,
}

impl ResponsePool {
    pub fn kept(&self) -> impl Iterator<Item = &PooledResponse> {
        self.responses.iter().filter(|r| r.kept)
    }

    pub fn n_discarded(&self) -> usize {
        self.responses.iter().filter(|r| !r.kept).count()
    }

    fn embeddings_of<'a>(&'a self, ids: impl Iterator<Item = &'a str>) -> Result<Vec<Vec<f64>>> {
        ids.map(|id| {
            let r = self
                .responses
                .iter()
                .find(|r| r.participant_id == id)
                .ok_or_else(|| Error::Integrity(format!("{}: unknown participant {id}", self.stimulus_id)))?;
            r.embedding
                .clone()
                .ok_or_else(|| Error::Invalid(format!("{}: response of {id} has no embedding", self.stimulus_id)))
        })
        .collect()
    }
}

/// Groups response rows by stimulus. A participant answering the same
/// stimulus twice is an integrity error.
pub fn build_pools(rows: &[HumanResponse]) -> Result<BTreeMap<String, ResponsePool>> {
    let mut pools: BTreeMap<String, ResponsePool> = BTreeMap::new();
    for row in rows {
        let pool = pools.entry(row.stimulus_id.clone()).or_insert_with(|| ResponsePool {
            stimulus_id: row.stimulus_id.clone(),
            responses: Vec::new(),
        });
        if pool.responses.iter().any(|r| r.participant_id == row.participant_id) {
            return Err(Error::Integrity(format!(
                "participant {} answered stimulus {} twice",
                row.participant_id, row.stimulus_id
            )));
        }
        pool.responses.push(PooledResponse {
            participant_id: row.participant_id.clone(),
            text: row.text.clone(),
            embedding: None,
            kept: true,
        });
    }
    Ok(pools)
}

/// Fills in unit-norm embeddings for every response.
pub fn embed_pool(pool: &mut ResponsePool, gw: &Gateway) -> Result<()> {
    let texts: Vec<String> = pool.responses.iter().map(|r| r.text.clone()).collect();
    let vectors = gw.embed(&texts)?;
    for (r, v) in pool.responses.iter_mut().zip(vectors) {
        r.embedding = Some(v);
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Flags every response whose mean cosine to all other responses of the
/// stimulus is below `threshold`. One pass over the full pool; earlier flags
/// are recomputed, so the operation is idempotent.
pub fn filter_responses(pool: &ResponsePool, threshold: f64) -> Result<ResponsePool> {
    let mut out = pool.clone();
    let n = pool.responses.len();
    if n < 2 {
        log::warn!("stimulus {}: {n} response(s), left unfiltered", pool.stimulus_id);
        return Ok(out);
    }
    let emb = pool.embeddings_of(pool.responses.iter().map(|r| r.participant_id.as_str()))?;
    for i in 0..n {
        let total: f64 = (0..n).filter(|&j| j != i).map(|j| dot(&emb[i], &emb[j])).sum();
        out.responses[i].kept = total / (n - 1) as f64 >= threshold;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub n_stimuli: usize,
    pub n_responses: usize,
    pub n_discarded: usize,
    pub n_unfiltered_stimuli: usize,
}

pub fn filter_all(
    pools: &BTreeMap<String, ResponsePool>,
    threshold: f64,
    exec: Execution,
) -> Result<(BTreeMap<String, ResponsePool>, FilterSummary)> {
    let list: Vec<&ResponsePool> = pools.values().collect();
    let filtered = exec.map_slice(&list, |p| filter_responses(p, threshold));
    let mut out = BTreeMap::new();
    for p in filtered {
        let p = p?;
        out.insert(p.stimulus_id.clone(), p);
    }
    let summary = FilterSummary {
        n_stimuli: out.len(),
        n_responses: out.values().map(|p| p.responses.len()).sum(),
        n_discarded: out.values().map(ResponsePool::n_discarded).sum(),
        n_unfiltered_stimuli: out.values().filter(|p| p.responses.len() < 2).count(),
    };
    Ok((out, summary))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusSplit {
    pub stimulus_id: String,
    pub truth_ids: Vec<String>,
    pub predictor_ids: Vec<String>,
    pub seed: u64,
}

/// Picks five kept responses as ground truth, pseudo-randomly from
/// `(stimulus_id, seed)`; the remaining kept responses become predictors.
pub fn consensus_split(pool: &ResponsePool, seed: u64) -> Result<ConsensusSplit> {
    let mut ids: Vec<&str> = pool.kept().map(|r| r.participant_id.as_str()).collect();
    if ids.len() < TRUTH_SIZE + 1 {
        return Err(Error::Invalid(format!(
            "stimulus {}: {} kept responses, need at least {}",
            pool.stimulus_id,
            ids.len(),
            TRUTH_SIZE + 1
        )));
    }
    ids.sort_unstable();
    let mut rng = replicate_rng(derive_seed(seed, &pool.stimulus_id), 0);
    let picked: BTreeSet<usize> = rand::seq::index::sample(&mut rng, ids.len(), TRUTH_SIZE).into_iter().collect();
    let (mut truth_ids, mut predictor_ids) = (Vec::new(), Vec::new());
    for (i, id) in ids.into_iter().enumerate() {
        if picked.contains(&i) {
            truth_ids.push(id.to_string());
        } else {
            predictor_ids.push(id.to_string());
        }
    }
    Ok(ConsensusSplit { stimulus_id: pool.stimulus_id.clone(), truth_ids, predictor_ids, seed })
}

/// Which responses feed a human css value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HumanSide {
    /// The fixed five-response ground-truth subset.
    Truth,
    /// The remaining responses, used for human-human consistency.
    Predictor,
    /// Every kept response.
    All,
}

impl HumanSide {
    pub fn agent_id(self) -> &'static str {
        match self {
            HumanSide::Truth => "human-truth",
            HumanSide::Predictor => "human-predictor",
            HumanSide::All => "human-all",
        }
    }
}

fn side_embeddings(
    stimulus: &str,
    pools: &BTreeMap<String, ResponsePool>,
    splits: &BTreeMap<String, ConsensusSplit>,
    side: HumanSide,
) -> Result<Vec<Vec<f64>>> {
    let pool = pools
        .get(stimulus)
        .ok_or_else(|| Error::Invalid(format!("no responses for stimulus {stimulus}")))?;
    let ids: Vec<&str> = match side {
        HumanSide::All => pool.kept().map(|r| r.participant_id.as_str()).collect(),
        HumanSide::Truth | HumanSide::Predictor => {
            let split = splits
                .get(stimulus)
                .ok_or_else(|| Error::Invalid(format!("no consensus split for stimulus {stimulus}")))?;
            if split.truth_ids.len() != TRUTH_SIZE {
                return Err(Error::Invalid(format!(
                    "stimulus {stimulus}: truth set has {} ids",
                    split.truth_ids.len()
                )));
            }
            let chosen = if side == HumanSide::Truth { &split.truth_ids } else { &split.predictor_ids };
            chosen.iter().map(String::as_str).collect()
        }
    };
    if ids.is_empty() {
        return Err(Error::Invalid(format!("stimulus {stimulus}: no responses on the {side:?} side")));
    }
    pool.embeddings_of(ids.into_iter())
}

/// Human css for every accepted variant of `scene`, using only the responses
/// on `side` for both the factual and counterfactual stimulus.
pub fn ground_truth_css(
    scene: &Scene,
    pools: &BTreeMap<String, ResponsePool>,
    splits: &BTreeMap<String, ConsensusSplit>,
    side: HumanSide,
) -> Result<Vec<CssRecord>> {
    let agent = side.agent_id();
    let factual = side_embeddings(&scene.scene_id, pools, splits, side)?;
    scene
        .accepted_variants()
        .map(|v| {
            let cf = side_embeddings(&v.variant_id, pools, splits, side)?;
            Ok(CssRecord {
                agent_id: agent.to_string(),
                scene_id: scene.scene_id.clone(),
                object_id: v.ablated_object_id.clone(),
                variant_id: v.variant_id.clone(),
                css: Some(css_score(&factual, &cf)?),
                status: RecordStatus::Ok,
                n_factual: factual.len(),
                n_counterfactual: cf.len(),
                factual_ref: format!("{agent}/{}", scene.scene_id),
                counterfactual_ref: format!("{agent}/{}", v.variant_id),
                error: None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedStimulus {
    pub scene_id: String,
    pub stimulus_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusSet {
    pub set_id: String,
    pub stimuli: Vec<PlannedStimulus>,
    pub participants: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyGroup {
    pub n_variants: usize,
    pub scene_ids: Vec<String>,
    pub sets: Vec<StimulusSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyPlan {
    pub participants_per_set: usize,
    pub groups: Vec<StudyGroup>,
}

/// Flat plan row for export to a crowdsourcing platform.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanRow {
    pub set_id: String,
    pub n_variants: usize,
    pub scene_id: String,
    pub stimulus_id: String,
    pub participants: usize,
}

impl Record for PlanRow {
    const KIND: &'static str = "study_plan";
    const COLUMNS: &'static [&'static str] = &["set_id", "n_variants", "scene_id", "stimulus_id", "participants"];
}

impl StudyPlan {
    pub fn total_participants(&self) -> usize {
        self.groups.iter().map(|g| g.sets.len() * self.participants_per_set).sum()
    }

    pub fn rows(&self) -> Vec<PlanRow> {
        let mut rows = Vec::new();
        for g in &self.groups {
            for set in &g.sets {
                for stim in &set.stimuli {
                    rows.push(PlanRow {
                        set_id: set.set_id.clone(),
                        n_variants: g.n_variants,
                        scene_id: stim.scene_id.clone(),
                        stimulus_id: stim.stimulus_id.clone(),
                        participants: set.participants,
                    });
                }
            }
        }
        rows
    }
}

/// Assigns the N+1 stimuli of every scene to N+1 mutually exclusive sets.
/// Scenes are grouped by N; stimulus `i` of the `k`-th scene in a group goes
/// to set `(i + k) mod (N+1)`, which balances set sizes.
pub fn route_study(scenes: &[&Scene], participants_per_set: usize) -> Result<StudyPlan> {
    let mut by_n: BTreeMap<usize, Vec<&Scene>> = BTreeMap::new();
    for s in scenes {
        let n = s.accepted_variants().count();
        if !(MIN_VARIANTS..=MAX_VARIANTS).contains(&n) {
            return Err(Error::Invalid(format!(
                "scene {} has {n} accepted variants, outside {MIN_VARIANTS}..={MAX_VARIANTS}",
                s.scene_id
            )));
        }
        by_n.entry(n).or_default().push(s);
    }
    let mut groups = Vec::new();
    for (n, members) in by_n {
        let mut sets: Vec<StimulusSet> = (0..=n)
            .map(|j| StimulusSet { set_id: format!("n{n}_set{j}"), stimuli: Vec::new(), participants: participants_per_set })
            .collect();
        for (k, scene) in members.iter().enumerate() {
            let stimuli = std::iter::once(scene.scene_id.clone()).chain(scene.accepted_variants().map(|v| v.variant_id.clone()));
            for (i, stim) in stimuli.enumerate() {
                sets[(i + k) % (n + 1)]
                    .stimuli
                    .push(PlannedStimulus { scene_id: scene.scene_id.clone(), stimulus_id: stim });
            }
        }
        groups.push(StudyGroup { n_variants: n, scene_ids: members.iter().map(|s| s.scene_id.clone()).collect(), sets });
    }
    Ok(StudyPlan { participants_per_set, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Embedder, MockEmbedder};
    use crate::store::{Validation, VariantRef};

    fn pool_from(texts: &[&str]) -> ResponsePool {
        let e = MockEmbedder::new(256, 0);
        let vecs = e.embed(&texts.iter().map(|t| t.to_string()).collect::<Vec<_>>()).unwrap();
        ResponsePool {
            stimulus_id: "s".into(),
            responses: texts
                .iter()
                .zip(vecs)
                .enumerate()
                .map(|(i, (t, v))| PooledResponse {
                    participant_id: format!("p{i:02}"),
                    text: t.to_string(),
                    embedding: Some(v),
                    kept: true,
                })
                .collect(),
        }
    }

    #[test]
    fn identical_responses_all_kept() {
        let p = filter_responses(&pool_from(&["a dog on grass"; 10]), 0.5).unwrap();
        assert_eq!(p.n_discarded(), 0);
    }

    #[test]
    fn outlier_vocabulary_discarded() {
        let mut texts = vec!["red kite flying"; 9];
        texts.push("old piano bench");
        let p = filter_responses(&pool_from(&texts), 0.5).unwrap();
        assert_eq!(p.n_discarded(), 1);
        assert!(!p.responses[9].kept);
        assert_eq!(filter_responses(&p, 0.5).unwrap(), p);
    }

    #[test]
    fn single_response_left_unfiltered() {
        let p = pool_from(&["x"]);
        assert_eq!(filter_responses(&p, 0.5).unwrap(), p);
    }

    #[test]
    fn duplicate_participant_rejected() {
        let row = HumanResponse { participant_id: "p".into(), stimulus_id: "s".into(), text: "t".into() };
        assert!(build_pools(&[row.clone(), row]).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ten = pool_from(&["a b"; 10]);
        let a = consensus_split(&ten, 7).unwrap();
        assert_eq!(a, consensus_split(&ten, 7).unwrap());
        assert_eq!((a.truth_ids.len(), a.predictor_ids.len()), (5, 5));
        assert!(a.truth_ids.iter().all(|t| !a.predictor_ids.contains(t)));
        assert_eq!(consensus_split(&pool_from(&["a"; 6]), 1).unwrap().predictor_ids.len(), 1);
        assert_eq!(consensus_split(&pool_from(&["a"; 12]), 1).unwrap().predictor_ids.len(), 7);
        assert!(consensus_split(&pool_from(&["a"; 5]), 1).is_err());
        let others: Vec<_> = (0..20).map(|s| consensus_split(&ten, s).unwrap().truth_ids).collect();
        assert!(others.iter().any(|t| *t != a.truth_ids));
    }

    #[test]
    fn split_ignores_discarded() {
        let mut p = pool_from(&["a"; 8]);
        p.responses[0].kept = false;
        p.responses[1].kept = false;
        let s = consensus_split(&p, 3).unwrap();
        assert!(!s.truth_ids.contains(&"p00".to_string()) && !s.predictor_ids.contains(&"p01".to_string()));
        assert_eq!(s.predictor_ids.len(), 1);
    }

    fn scene(id: &str, n: usize) -> Scene {
        Scene {
            scene_id: id.into(),
            image_path: format!("{id}.png").into(),
            width: 4,
            height: 4,
            objects: Vec::new(),
            variants: (0..n)
                .map(|i| VariantRef {
                    variant_id: format!("{id}_v{i}"),
                    ablated_object_id: format!("o{i}"),
                    image_path: format!("{id}_v{i}.png").into(),
                    validation: Validation::accepted(),
                })
                .collect(),
        }
    }

    fn stimuli_of(s: &Scene) -> Vec<String> {
        std::iter::once(s.scene_id.clone()).chain(s.variants.iter().map(|v| v.variant_id.clone())).collect()
    }

    #[test]
    fn routing_examples() {
        let one = scene("a", 3);
        let plan = route_study(&[&one], 10).unwrap();
        assert_eq!(plan.groups[0].sets.len(), 4);
        assert!(plan.groups[0].sets.iter().all(|s| s.stimuli.len() == 1));

        let two = scene("b", 3);
        let plan = route_study(&[&one, &two], 10).unwrap();
        for set in &plan.groups[0].sets {
            assert_eq!(set.stimuli.len(), 2);
            for s in [&one, &two] {
                let own = stimuli_of(s);
                assert!(set.stimuli.iter().filter(|x| own.contains(&x.stimulus_id)).count() <= 1);
            }
        }
        assert!(route_study(&[&scene("c", 2)], 10).is_err());
        assert!(route_study(&[&scene("c", 7)], 10).is_err());
    }

    #[test]
    fn routing_groups_by_variant_count() {
        let scenes: Vec<Scene> = (0..12).map(|i| scene(&format!("s{i}"), 3 + i % 4)).collect();
        let refs: Vec<&Scene> = scenes.iter().collect();
        let plan = route_study(&refs, 10).unwrap();
        let sizes: Vec<usize> = plan.groups.iter().map(|g| g.sets.len()).collect();
        assert_eq!(sizes, vec![4, 5, 6, 7]);
        assert_eq!(plan.total_participants(), 220);
        for g in &plan.groups {
            for set in &g.sets {
                for s in &scenes {
                    let own = stimuli_of(s);
                    assert!(set.stimuli.iter().filter(|x| own.contains(&x.stimulus_id)).count() <= 1);
                }
            }
        }
    }
}
