use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Pipeline, Stage, StageOutcome};
use crate::alignment::{evaluate_agent, AlignmentSummary, Exclusion, SceneAlignment};
use crate::bias::{bias_profile, extract_attributes, join, Attribute, AttributeRow, BiasProfile, PersonLexicon};
use crate::css::{build_saliency_raster, describe_scene, score_scene, CssRecord, LegendEntry, RasterLegend, RasterScale};
use crate::error::{Error, Result};
use crate::gateway::{load_image, save_image, Gateway, Role};
use crate::human::{
    build_pools, consensus_split, embed_pool, filter_all, ground_truth_css, route_study, ConsensusSplit,
    HumanResponse, HumanSide, ResponsePool,
};
use crate::mask::preprocess;
use crate::plot;
use crate::raster::Normalization;
use crate::stats::{
    bootstrap_bias_gap, driving_factor, permutation_null, AgentItems, BootstrapRow, DrivingFactorRow, GapRecord,
    PermutationRow, ResampleConfig,
};
use crate::store::records::{read_records, write_atomic, write_records, Format, Record};
use crate::store::{
    apply_validation, load_manifest, save_manifest, DescriptionRecord, MaskRef, ObjectRef, ReviewDecision, Rle, Scene,
    SceneSet, Validation, ValidationVote, VariantRef,
};
use crate::util::{derive_seed, sig6, slug};
use crate::whitebox::{compare_dataset, stack_files};

/// Row of the driving-factor summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub delta_r_type: String,
    #[serde(with = "sig6")]
    pub corr: f64,
    #[serde(with = "sig6")]
    pub null_mean: f64,
    #[serde(with = "sig6")]
    pub null_std: f64,
    #[serde(with = "sig6")]
    pub p: f64,
}

impl Record for Table1Row {
    const KIND: &'static str = "table1";
    const COLUMNS: &'static [&'static str] = &["delta_r_type", "corr", "null_mean", "null_std", "p"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NullDump {
    attribute: Attribute,
    observed: f64,
    distribution: Vec<f64>,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::parse(path.display().to_string(), e))
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Keeps successes; if nothing succeeded, returns the first error so a total
/// backend outage surfaces as a backend failure.
fn collect_partial<T>(results: Vec<Result<T>>, what: &str) -> Result<(Vec<T>, usize)> {
    let mut ok = Vec::new();
    let mut first = None;
    let mut failed = 0;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                log::warn!("{what}: {e}");
                failed += 1;
                first.get_or_insert(e);
            }
        }
    }
    match first {
        Some(e) if ok.is_empty() => Err(e),
        _ => Ok((ok, failed)),
    }
}

fn prepare_scene(file: &Path, gw: &Gateway, cfg: &super::PrepareConfig, dir: &Path) -> Result<Scene> {
    let scene_id = stem(file);
    let image = load_image(file)?;
    let dims = image.dimensions();
    let image_rel = PathBuf::from(format!("images/{scene_id}.png"));
    save_image(&image, &dir.join(&image_rel))?;
    let labels = gw.generate_object_list(&image)?;
    let masks = if labels.is_empty() { Vec::new() } else { gw.segment(&image, &labels, cfg.segment_threshold)? };
    let processed = preprocess(&masks, dims, &cfg.preprocess)?;
    let mut used = BTreeSet::new();
    let mut objects = Vec::new();
    let mut variants = Vec::new();
    for p in processed {
        let base = match slug(&p.mask.label) {
            s if s.is_empty() => "object".to_string(),
            s => s,
        };
        let mut object_id = base.clone();
        let mut k = 2;
        while !used.insert(object_id.clone()) {
            object_id = format!("{base}_{k}");
            k += 1;
        }
        let variant_id = format!("{scene_id}_{object_id}");
        let variant_rel = PathBuf::from(format!("variants/{variant_id}.png"));
        save_image(&gw.inpaint(&image, &p.mask)?, &dir.join(&variant_rel))?;
        objects.push(ObjectRef { object_id: object_id.clone(), label: p.mask.label.clone(), mask: MaskRef::Rle(Rle::encode(&p.mask)) });
        variants.push(VariantRef {
            variant_id,
            ablated_object_id: object_id,
            image_path: variant_rel,
            validation: if cfg.auto_accept { Validation::accepted() } else { Validation::pending() },
        });
    }
    Ok(Scene { scene_id, image_path: image_rel, width: dims.0, height: dims.1, objects, variants })
}

impl Pipeline {
    fn dataset_inputs(&self, set: &SceneSet) -> Result<BTreeMap<String, String>> {
        let (k, v) = self.dataset_input(set)?;
        Ok(BTreeMap::from([(k, v)]))
    }

    fn read_css(&self) -> Result<(Vec<(String, PathBuf)>, BTreeMap<String, Vec<CssRecord>>)> {
        let files = self.css_files()?;
        let mut by_agent: BTreeMap<String, Vec<CssRecord>> = BTreeMap::new();
        for (_, path) in &files {
            for r in read_records::<CssRecord>(path)? {
                by_agent.entry(r.agent_id.clone()).or_default().push(r);
            }
        }
        Ok((files, by_agent))
    }

    pub(super) fn prepare(&self) -> Result<StageOutcome> {
        let images = self
            .cfg
            .images
            .as_ref()
            .ok_or_else(|| Error::Invalid("prepare needs `images` in the config".into()))?;
        let images = self.resolve(images);
        let mut named = vec![("images".to_string(), images.clone())];
        named.extend(self.world_input());
        let inputs = self.inputs(&named)?;
        let shared: Vec<_> = self.cfg.backends.iter().filter(|b| b.role != Role::Embed).collect();
        let key = json!({ "prepare": self.cfg.prepare, "backends": shared, "seed": self.cfg.seed });
        self.execute(Stage::Prepare, &key, inputs, |dir| {
            let files = png_files(&images)?;
            let gw = self.gateway(&[Role::Describe, Role::Segment, Role::Inpaint], None)?;
            let results = self.exec().map_slice(&files, |f| prepare_scene(f, &gw, &self.cfg.prepare, dir));
            let (scenes, failed) = collect_partial(results, "prepare")?;
            let set = SceneSet::new(dir, "prepared", scenes)?;
            save_manifest(&set, &dir.join("manifest.json"))?;
            Ok(failed)
        })
    }

    pub(super) fn validate_variants(&self) -> Result<StageOutcome> {
        let (base, root) = self.base_manifest();
        let mut named = vec![("manifest".to_string(), base.clone())];
        let v = &self.cfg.validation;
        named.extend(v.votes.iter().map(|p| ("votes".to_string(), self.resolve(p))));
        named.extend(v.reviews.iter().map(|p| ("reviews".to_string(), self.resolve(p))));
        let inputs = self.inputs(&named)?;
        self.execute(Stage::Validate, &json!({}), inputs, |dir| {
            let set = load_manifest(&base, Some(&root))?;
            let votes: Vec<ValidationVote> = match &v.votes {
                Some(p) => read_records(&self.resolve(p))?,
                None => Vec::new(),
            };
            let reviews: Vec<ReviewDecision> = match &v.reviews {
                Some(p) => read_records(&self.resolve(p))?,
                None => Vec::new(),
            };
            let validated = apply_validation(&set, &votes, &reviews)?;
            save_manifest(&validated, &dir.join("manifest.json"))?;
            Ok(0)
        })
    }

    pub(super) fn describe(&self) -> Result<StageOutcome> {
        if self.cfg.agents.is_empty() {
            return Err(Error::Invalid("no agents configured".into()));
        }
        let set = self.load_set()?;
        let mut inputs = self.dataset_inputs(&set)?;
        inputs.extend(self.inputs(&self.world_input())?);
        let embed: Vec<_> = self.cfg.backends.iter().filter(|b| b.role == Role::Embed).collect();
        let key = json!({ "agents": self.cfg.agents, "embed": embed, "seed": self.cfg.seed });
        self.execute(Stage::Describe, &key, inputs, |dir| {
            let scenes: Vec<&Scene> = set.admitted().collect();
            let mut n_failed = 0;
            let mut n_ok = 0;
            let mut first_failure = None;
            for agent in &self.cfg.agents {
                let gw = self.gateway(&[Role::Embed], Some(&agent.describe))?;
                let per_scene = self.exec().map_slice(&scenes, |s| describe_scene(s, &set.root, &gw, &agent.agent_id));
                let mut records = Vec::new();
                let mut failures = BTreeMap::new();
                for d in per_scene {
                    records.extend(d.records);
                    failures.extend(d.failures);
                }
                n_ok += records.len();
                n_failed += failures.len();
                if first_failure.is_none() {
                    first_failure = failures.values().next().cloned();
                }
                write_records(&records, &dir.join(format!("{}.json", agent.agent_id)), Format::Json)?;
                write_json(&failures, &dir.join(format!("{}.failures.json", agent.agent_id)))?;
            }
            if n_ok == 0 {
                if let Some(msg) = first_failure {
                    return Err(Error::Backend { backend: "describe".into(), message: msg });
                }
            }
            Ok(n_failed)
        })
    }

    pub(super) fn score(&self) -> Result<StageOutcome> {
        let set = self.load_set()?;
        let mut inputs = self.dataset_inputs(&set)?;
        let describe = self.stage_dir(Stage::Describe);
        inputs.extend(self.inputs(&[("describe".to_string(), describe.join(super::STAGE_RECORD))])?);
        let agents: Vec<&str> = self.cfg.agents.iter().map(|a| a.agent_id.as_str()).collect();
        self.execute(Stage::Score, &json!({ "agents": agents }), inputs, |dir| {
            let mut n_failed = 0;
            for agent in &agents {
                let records: Vec<DescriptionRecord> = read_records(&describe.join(format!("{agent}.json")))?;
                let failures: BTreeMap<String, String> = read_json(&describe.join(format!("{agent}.failures.json")))?;
                let by_id: BTreeMap<String, DescriptionRecord> =
                    records.into_iter().map(|r| (r.stimulus_id.clone(), r)).collect();
                let mut out = Vec::new();
                for scene in set.admitted() {
                    out.extend(score_scene(scene, agent, &by_id, &failures));
                }
                n_failed += out.iter().filter(|r| r.ok().is_none()).count();
                write_records(&out, &dir.join(format!("{agent}.csv")), Format::Csv)?;
            }
            Ok(n_failed)
        })
    }

    pub(super) fn map(&self) -> Result<StageOutcome> {
        let set = self.load_set()?;
        let mut inputs = self.dataset_inputs(&set)?;
        let score = self.stage_dir(Stage::Score);
        inputs.extend(self.inputs(&[("score".to_string(), score.join(super::STAGE_RECORD))])?);
        self.execute(Stage::Map, &json!({ "map": self.cfg.map }), inputs, |dir| {
            for agent in &self.cfg.agents {
                let records: Vec<CssRecord> = read_records(&score.join(format!("{}.csv", agent.agent_id)))?;
                let global = records.iter().filter_map(CssRecord::ok).fold(0.0, f64::max);
                let scale_of = |scene_max: f64| match self.cfg.map.normalization {
                    Normalization::Global => (RasterScale::Global(global), global),
                    _ => (RasterScale::PerScene, scene_max),
                };
                let mut by_scene: BTreeMap<&str, Vec<&CssRecord>> = BTreeMap::new();
                for r in &records {
                    by_scene.entry(r.scene_id.as_str()).or_default().push(r);
                }
                let scenes: Vec<(&str, Vec<&CssRecord>)> = by_scene.into_iter().collect();
                let results = self.exec().map_slice(&scenes, |(sid, recs)| -> Result<()> {
                    let scene = set.scene(sid).ok_or_else(|| Error::Integrity(format!("css for unknown scene {sid}")))?;
                    let mut masks = BTreeMap::new();
                    for o in &scene.objects {
                        masks.insert(o.object_id.clone(), scene.decode_object_mask(o, &set.root)?);
                    }
                    let scene_max = recs.iter().filter_map(|r| r.ok()).fold(0.0, f64::max);
                    let (scale, divisor) = scale_of(scene_max);
                    let raster = build_saliency_raster((scene.width, scene.height), &masks, recs, scale)?;
                    let base = dir.join(&agent.agent_id).join(sid);
                    raster.save_png(&base.with_extension("png"))?;
                    let legend = RasterLegend {
                        scene_id: sid.to_string(),
                        agent_id: agent.agent_id.clone(),
                        normalization: raster.normalization,
                        divisor,
                        objects: recs
                            .iter()
                            .map(|r| LegendEntry {
                                object_id: r.object_id.clone(),
                                label: scene.object(&r.object_id).map(|o| o.label.clone()).unwrap_or_default(),
                                css: r.ok(),
                                value: r.ok().filter(|_| divisor > 0.0).map(|c| (c / divisor).clamp(0.0, 1.0)),
                            })
                            .collect(),
                    };
                    write_json(&legend, &base.with_extension("json"))
                });
                results.into_iter().collect::<Result<Vec<()>>>()?;
            }
            Ok(0)
        })
    }

    pub(super) fn human_filter(&self) -> Result<StageOutcome> {
        let responses = self
            .cfg
            .human
            .responses
            .as_ref()
            .ok_or_else(|| Error::Invalid("human-filter needs `human.responses` in the config".into()))?;
        let responses = self.resolve(responses);
        let inputs = self.inputs(&[("responses".to_string(), responses.clone())])?;
        let embed: Vec<_> = self.cfg.backends.iter().filter(|b| b.role == Role::Embed).collect();
        let key = json!({ "filter_threshold": self.cfg.human.filter_threshold, "embed": embed, "seed": self.cfg.seed });
        self.execute(Stage::HumanFilter, &key, inputs, |dir| {
            let rows: Vec<HumanResponse> = read_records(&responses)?;
            let pools = build_pools(&rows)?;
            let gw = self.gateway(&[Role::Embed], None)?;
            let list: Vec<ResponsePool> = pools.into_values().collect();
            let embedded = self.exec().map_slice(&list, |p| {
                let mut p = p.clone();
                embed_pool(&mut p, &gw).map(|_| p)
            });
            let mut pools = BTreeMap::new();
            for p in embedded {
                let p = p?;
                pools.insert(p.stimulus_id.clone(), p);
            }
            let (filtered, summary) = filter_all(&pools, self.cfg.human.filter_threshold, self.exec())?;
            let list: Vec<&ResponsePool> = filtered.values().collect();
            write_json(&list, &dir.join("pools.json"))?;
            write_json(&summary, &dir.join("summary.json"))?;
            Ok(0)
        })
    }

    pub(super) fn consensus(&self) -> Result<StageOutcome> {
        let set = self.load_set()?;
        let mut inputs = self.dataset_inputs(&set)?;
        let pools_path = self.stage_dir(Stage::HumanFilter).join("pools.json");
        inputs.extend(self.inputs(&[("pools".to_string(), pools_path.clone())])?);
        self.execute(Stage::Consensus, &json!({ "seed": self.cfg.seed }), inputs, |dir| {
            let list: Vec<ResponsePool> = read_json(&pools_path)?;
            let pools: BTreeMap<String, ResponsePool> = list.into_iter().map(|p| (p.stimulus_id.clone(), p)).collect();
            let mut splits = BTreeMap::new();
            let mut n_failed = 0;
            for p in pools.values() {
                match consensus_split(p, self.cfg.seed) {
                    Ok(s) => {
                        splits.insert(s.stimulus_id.clone(), s);
                    }
                    Err(e) => {
                        log::warn!("consensus: {e}");
                        n_failed += 1;
                    }
                }
            }
            let mut records = Vec::new();
            for side in [HumanSide::Truth, HumanSide::Predictor, HumanSide::All] {
                for scene in set.admitted() {
                    match ground_truth_css(scene, &pools, &splits, side) {
                        Ok(r) => records.extend(r),
                        Err(e) => {
                            log::warn!("{}: scene {}: {e}", side.agent_id(), scene.scene_id);
                            n_failed += 1;
                        }
                    }
                }
            }
            if records.is_empty() {
                return Err(Error::Invalid("no scene has enough human responses for ground truth".into()));
            }
            let list: Vec<&ConsensusSplit> = splits.values().collect();
            write_json(&list, &dir.join("splits.json"))?;
            write_records(&records, &dir.join("css.csv"), Format::Csv)?;
            Ok(n_failed)
        })
    }

    pub(super) fn eval(&self) -> Result<StageOutcome> {
        let (files, by_agent) = self.read_css()?;
        let inputs = self.inputs(&files)?;
        let truth_id = self.cfg.eval.truth_agent.clone();
        self.execute(Stage::Eval, &json!({ "truth_agent": truth_id }), inputs, |dir| {
            let truth = by_agent
                .get(&truth_id)
                .ok_or_else(|| Error::Invalid(format!("no css records for truth agent {truth_id:?}")))?;
            let mut summaries: Vec<AlignmentSummary> = Vec::new();
            let mut scenes: Vec<SceneAlignment> = Vec::new();
            let mut exclusions: BTreeMap<String, Vec<Exclusion>> = BTreeMap::new();
            for (agent, records) in &by_agent {
                if *agent == truth_id {
                    continue;
                }
                let report = evaluate_agent(records, truth, self.exec())?;
                summaries.push(report.summary());
                exclusions.insert(agent.clone(), report.excluded.clone());
                scenes.extend(report.scenes);
            }
            write_records(&summaries, &dir.join("alignment.csv"), Format::Csv)?;
            write_records(&scenes, &dir.join("scenes.csv"), Format::Csv)?;
            write_json(&exclusions, &dir.join("exclusions.json"))?;
            Ok(0)
        })
    }

    pub(super) fn bias(&self) -> Result<StageOutcome> {
        let set = self.load_set()?;
        let mut inputs = self.dataset_inputs(&set)?;
        let (files, by_agent) = self.read_css()?;
        inputs.extend(self.inputs(&files)?);
        self.execute(Stage::Bias, &json!({ "bias": self.cfg.bias }), inputs, |dir| {
            let lexicon = if self.cfg.bias.person_words.is_empty() {
                PersonLexicon::default()
            } else {
                PersonLexicon { words: self.cfg.bias.person_words.clone() }
            };
            let attributes = extract_attributes(&set, &self.cfg.bias.gbvs, &lexicon, self.exec())?;
            write_records(&attributes, &dir.join("attributes.csv"), Format::Csv)?;
            let mut profiles: Vec<BiasProfile> = Vec::new();
            let mut n_failed = 0;
            for records in by_agent.values() {
                match bias_profile(records, &attributes) {
                    Ok(p) => profiles.push(p),
                    Err(e) => {
                        log::warn!("bias profile: {e}");
                        n_failed += 1;
                    }
                }
            }
            write_records(&profiles, &dir.join("profiles.csv"), Format::Csv)?;
            Ok(n_failed)
        })
    }

    pub(super) fn stats(&self) -> Result<StageOutcome> {
        let attributes_path = self.stage_dir(Stage::Bias).join("attributes.csv");
        let alignment_path = self.stage_dir(Stage::Eval).join("alignment.csv");
        let (files, by_agent) = self.read_css()?;
        let mut named = files;
        named.push(("attributes".into(), attributes_path.clone()));
        if alignment_path.exists() {
            named.push(("alignment".into(), alignment_path.clone()));
        }
        let inputs = self.inputs(&named)?;
        let key = json!({ "stats": self.cfg.stats, "seed": self.cfg.seed, "truth_agent": self.cfg.eval.truth_agent });
        self.execute(Stage::Stats, &key, inputs, |dir| {
            let sc = &self.cfg.stats;
            let attributes: Vec<AttributeRow> = read_records(&attributes_path)?;
            let human_records = by_agent
                .get(&sc.human_agent)
                .ok_or_else(|| Error::Invalid(format!("no css records for human agent {:?}", sc.human_agent)))?;
            let human = join(human_records, &attributes);
            let models: Vec<&String> = by_agent
                .keys()
                .filter(|a| !a.starts_with("human-") && **a != sc.human_agent && **a != self.cfg.eval.truth_agent)
                .collect();
            let resample = |tag: String| ResampleConfig {
                n_iterations: sc.n_iterations,
                seed: derive_seed(self.cfg.seed, &tag),
                tail: sc.tail,
            };
            let mut n_failed = 0;
            let mut boot = Vec::new();
            let mut perm = Vec::new();
            for agent in &models {
                let items = join(&by_agent[*agent], &attributes);
                for a in Attribute::ALL {
                    let c = resample(format!("bootstrap/{agent}/{}", a.name()));
                    match bootstrap_bias_gap(&items, &human, a, &c, self.exec()) {
                        Ok(s) => boot.push(BootstrapRow {
                            agent_id: agent.to_string(),
                            attribute: a.name().into(),
                            delta_r: s.observed,
                            p: s.p,
                            tail: s.tail,
                            n_iterations: s.n_iterations,
                            n_skipped: s.n_skipped,
                        }),
                        Err(e) => {
                            log::warn!("bootstrap {agent}/{}: {e}", a.name());
                            n_failed += 1;
                        }
                    }
                }
            }
            for agent in models.iter().copied().chain(std::iter::once(&sc.human_agent)) {
                let items = join(&by_agent[agent], &attributes);
                for a in Attribute::ALL {
                    let c = resample(format!("permutation/{agent}/{}", a.name()));
                    match permutation_null(&items.attribute(a), &items.css, a.corr_kind(), &c, self.exec()) {
                        Ok(s) => perm.push(PermutationRow {
                            agent_id: agent.to_string(),
                            attribute: a.name().into(),
                            observed: s.observed,
                            null_mean: s.mean,
                            null_std: s.std,
                            p: s.p,
                            n_iterations: s.n_iterations,
                        }),
                        Err(e) => {
                            log::warn!("permutation {agent}/{}: {e}", a.name());
                            n_failed += 1;
                        }
                    }
                }
            }
            write_records(&boot, &dir.join("bootstrap.csv"), Format::Csv)?;
            write_records(&perm, &dir.join("permutation.csv"), Format::Csv)?;

            let accuracy: BTreeMap<String, f64> = if alignment_path.exists() {
                read_records::<AlignmentSummary>(&alignment_path)?
                    .into_iter()
                    .map(|s| (s.agent_id, s.top1_accuracy))
                    .collect()
            } else {
                BTreeMap::new()
            };
            let Some(&human_acc) = accuracy.get(&sc.human_accuracy_agent) else {
                log::info!("no Top-1 accuracy for {:?}; driving-factor analysis skipped", sc.human_accuracy_agent);
                return Ok(n_failed);
            };
            let agents: Vec<AgentItems> = models
                .iter()
                .filter_map(|a| {
                    accuracy.get(*a).map(|&acc| AgentItems { items: join(&by_agent[*a], &attributes), top1_accuracy: acc })
                })
                .collect();
            if agents.len() < 3 {
                log::info!("{} agents with accuracy; driving-factor analysis needs 3", agents.len());
                return Ok(n_failed);
            }
            let human = AgentItems { items: human, top1_accuracy: human_acc };
            let mut rows: Vec<DrivingFactorRow> = Vec::new();
            let mut gaps: Vec<GapRecord> = Vec::new();
            let mut nulls = Vec::new();
            for a in Attribute::ALL {
                let c = resample(format!("driving/{}", a.name()));
                match driving_factor(&agents, &human, a, &c, self.exec()) {
                    Ok(df) => {
                        rows.push(df.row());
                        if gaps.is_empty() {
                            gaps = df.gaps.clone();
                        }
                        nulls.push(NullDump { attribute: a, observed: df.null.observed, distribution: df.null.distribution });
                    }
                    Err(e) => {
                        log::warn!("driving factor {}: {e}", a.name());
                        n_failed += 1;
                    }
                }
            }
            write_records(&rows, &dir.join("driving_factors.csv"), Format::Csv)?;
            write_records(&gaps, &dir.join("gaps.csv"), Format::Csv)?;
            write_json(&nulls, &dir.join("driving_nulls.json"))?;
            Ok(n_failed)
        })
    }

    pub(super) fn whitebox(&self) -> Result<StageOutcome> {
        let stacks_dir = self
            .cfg
            .whitebox
            .stacks_dir
            .as_ref()
            .ok_or_else(|| Error::Invalid("whitebox needs `whitebox.stacks_dir` in the config".into()))?;
        let stacks_dir = self.resolve(stacks_dir);
        let agent = match &self.cfg.whitebox.agent_id {
            Some(a) => a.clone(),
            None => self
                .cfg
                .agents
                .first()
                .map(|a| a.agent_id.clone())
                .ok_or_else(|| Error::Invalid("whitebox: no agent to compare with".into()))?,
        };
        let set = self.load_set()?;
        let mut inputs = self.dataset_inputs(&set)?;
        let (files, by_agent) = self.read_css()?;
        inputs.extend(self.inputs(&files)?);
        inputs.extend(self.inputs(&[("stacks".to_string(), stacks_dir.clone())])?);
        self.execute(Stage::Whitebox, &json!({ "agent_id": agent }), inputs, |dir| {
            let records = by_agent.get(&agent).map(Vec::as_slice).unwrap_or_default();
            if records.is_empty() {
                return Err(Error::Invalid(format!("whitebox: no css records for {agent:?}")));
            }
            let report = compare_dataset(&set, &stack_files(&stacks_dir)?, records, &agent, self.exec())?;
            write_records(&report.scenes, &dir.join("scenes.csv"), Format::Csv)?;
            write_records(&report.summaries, &dir.join("summary.csv"), Format::Csv)?;
            Ok(0)
        })
    }

    pub(super) fn studyplan(&self) -> Result<StageOutcome> {
        let set = self.load_set()?;
        let inputs = self.dataset_inputs(&set)?;
        let pps = self.cfg.human.participants_per_set;
        self.execute(Stage::Studyplan, &json!({ "participants_per_set": pps }), inputs, |dir| {
            let scenes: Vec<&Scene> = set.admitted().collect();
            let plan = route_study(&scenes, pps)?;
            write_records(&plan.rows(), &dir.join("plan.csv"), Format::Csv)?;
            write_json(&plan, &dir.join("plan.json"))?;
            Ok(0)
        })
    }

    pub(super) fn report(&self) -> Result<StageOutcome> {
        let driving = self.stage_dir(Stage::Stats).join("driving_factors.csv");
        let nulls = self.stage_dir(Stage::Stats).join("driving_nulls.json");
        let alignment = self.stage_dir(Stage::Eval).join("alignment.csv");
        let profiles = self.stage_dir(Stage::Bias).join("profiles.csv");
        let (files, by_agent) = self.read_css()?;
        let mut named = files;
        for (name, p) in [("driving", &driving), ("nulls", &nulls), ("alignment", &alignment), ("profiles", &profiles)] {
            if p.exists() {
                named.push((name.to_string(), p.clone()));
            }
        }
        let inputs = self.inputs(&named)?;
        self.execute(Stage::Report, &json!({}), inputs, |dir| {
            if driving.exists() {
                let rows: Vec<DrivingFactorRow> = read_records(&driving)?;
                let table: Vec<Table1Row> = rows
                    .into_iter()
                    .map(|r| Table1Row { delta_r_type: r.delta_r_type, corr: r.corr, null_mean: r.null_mean, null_std: r.null_std, p: r.p })
                    .collect();
                write_records(&table, &dir.join("table1.csv"), Format::Csv)?;
            }
            if nulls.exists() {
                for n in read_json::<Vec<NullDump>>(&nulls)? {
                    let title = format!("Null of corr(Δr {}, ΔAcc)", n.attribute.name());
                    let svg = plot::histogram(&title, &n.distribution, 40, Some(n.observed));
                    write_atomic(&dir.join(format!("null_{}.svg", n.attribute.name())), svg.as_bytes())?;
                }
            }
            for (agent, records) in &by_agent {
                let values: Vec<f64> = records.iter().filter_map(CssRecord::ok).collect();
                let svg = plot::histogram(&format!("css, {agent}"), &values, 20, None);
                write_atomic(&dir.join(format!("css_{agent}.svg")), svg.as_bytes())?;
            }
            if alignment.exists() {
                let rows: Vec<AlignmentSummary> = read_records(&alignment)?;
                let labels: Vec<String> = rows.iter().map(|r| r.agent_id.clone()).collect();
                let top1: Vec<Option<f64>> = rows.iter().map(|r| Some(r.top1_accuracy)).collect();
                let tau: Vec<Option<f64>> = rows.iter().map(|r| r.tau_mean).collect();
                write_atomic(&dir.join("top1.svg"), plot::bar_chart("Top-1 accuracy", &labels, &top1).as_bytes())?;
                write_atomic(&dir.join("tau.svg"), plot::bar_chart("Mean Kendall tau", &labels, &tau).as_bytes())?;
            }
            if profiles.exists() {
                let rows: Vec<BiasProfile> = read_records(&profiles)?;
                let labels: Vec<String> = rows.iter().map(|r| r.agent_id.clone()).collect();
                for a in Attribute::ALL {
                    let values: Vec<Option<f64>> = rows.iter().map(|r| r.get(a)).collect();
                    let svg = plot::bar_chart(&format!("r_{}", a.name()), &labels, &values);
                    write_atomic(&dir.join(format!("bias_{}.svg", a.name())), svg.as_bytes())?;
                }
            }
            Ok(0)
        })
    }
}
