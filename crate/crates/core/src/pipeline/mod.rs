//! Stage runner behind the command-line tool.
//!
//! Every stage writes into `<output_dir>/<stage>/` and records a
//! `stage.json` with the hash of its configuration, the hashes of its inputs
//! and the hashes of everything it wrote. A stage whose record still matches
//! is skipped, so interrupted runs can simply be restarted. The output root
//! also holds `config.json`, the configuration as given, and
//! `config.sha256`.

mod stages;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gateway::{BackendConfig, Gateway, MockWorld, Role};
use crate::gbvs::GbvsConfig;
use crate::human::{DEFAULT_FILTER_THRESHOLD, DEFAULT_PARTICIPANTS_PER_SET};
use crate::mask::PreprocessParams;
use crate::raster::Normalization;
use crate::stats::{Tail, DEFAULT_ITERATIONS};
use crate::store::records::write_atomic;
use crate::store::{load_manifest, SceneSet};
use crate::util::sha256_hex;

pub use stages::Table1Row;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub agent_id: String,
    pub describe: BackendConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self { agent_id: "mock".into(), describe: BackendConfig::for_role(Role::Describe, "mock:world") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    pub segment_threshold: f64,
    pub preprocess: PreprocessParams,
    /// Mark new variants accepted instead of pending annotator review.
    pub auto_accept: bool,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self { segment_threshold: 0.4, preprocess: PreprocessParams::default(), auto_accept: false }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    pub votes: Option<PathBuf>,
    pub reviews: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    /// `perscene` or `global`.
    pub normalization: Normalization,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self { normalization: Normalization::PerScene }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HumanConfig {
    pub responses: Option<PathBuf>,
    pub filter_threshold: f64,
    pub participants_per_set: usize,
}

impl Default for HumanConfig {
    fn default() -> Self {
        Self {
            responses: None,
            filter_threshold: DEFAULT_FILTER_THRESHOLD,
            participants_per_set: DEFAULT_PARTICIPANTS_PER_SET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub truth_agent: String,
    /// Extra css records, e.g. a reference ranking.
    pub truth_file: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { truth_agent: "human-truth".into(), truth_file: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasConfig {
    pub gbvs: GbvsConfig,
    /// Replaces the built-in person lexicon when non-empty.
    pub person_words: Vec<String>,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self { gbvs: GbvsConfig::default(), person_words: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub n_iterations: usize,
    pub tail: Tail,
    /// Agent whose css is the human side of every bias gap.
    pub human_agent: String,
    /// Agent whose Top-1 accuracy is the human accuracy.
    pub human_accuracy_agent: String,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            n_iterations: DEFAULT_ITERATIONS,
            tail: Tail::Auto,
            human_agent: "human-truth".into(),
            human_accuracy_agent: "human-predictor".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WhiteboxConfig {
    pub stacks_dir: Option<PathBuf>,
    /// Agent whose css the stacks are compared with; defaults to the first agent.
    pub agent_id: Option<String>,
}

/// Everything a run needs. Relative paths resolve against the directory of
/// the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Factual images (`*.png`, scene id = file stem) for `prepare`.
    pub images: Option<PathBuf>,
    /// Existing dataset manifest, used instead of the prepared one.
    pub manifest: Option<PathBuf>,
    /// Root for paths inside `manifest`; defaults to its directory.
    pub dataset_root: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub mock_world: Option<PathBuf>,
    /// Object listing (describe role), embedding, segmentation, inpainting.
    pub backends: Vec<BackendConfig>,
    pub agents: Vec<AgentConfig>,
    /// Added to every backend seed and used to derive resampling seeds.
    pub seed: u64,
    pub execution: Execution,
    pub prepare: PrepareConfig,
    pub validation: ValidationConfig,
    pub map: MapConfig,
    pub human: HumanConfig,
    pub eval: EvalConfig,
    pub bias: BiasConfig,
    pub stats: StatsConfig,
    pub whitebox: WhiteboxConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            images: None,
            manifest: None,
            dataset_root: None,
            output_dir: PathBuf::from("out"),
            mock_world: None,
            backends: vec![
                BackendConfig::for_role(Role::Describe, "mock:world"),
                BackendConfig::for_role(Role::Embed, "mock:bow"),
                BackendConfig::for_role(Role::Segment, "mock:world"),
                BackendConfig::for_role(Role::Inpaint, "mock:ring"),
            ],
            agents: vec![AgentConfig::default()],
            seed: 0,
            execution: Execution::Parallel,
            prepare: PrepareConfig::default(),
            validation: ValidationConfig::default(),
            map: MapConfig::default(),
            human: HumanConfig::default(),
            eval: EvalConfig::default(),
            bias: BiasConfig::default(),
            stats: StatsConfig::default(),
            whitebox: WhiteboxConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::parse(format!("{}:{}:{}", path.display(), e.line(), e.column()), e))
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("config serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn validate(&self) -> Result<()> {
        let mut roles = std::collections::BTreeSet::new();
        for b in &self.backends {
            b.validate()?;
            if !roles.insert(b.role) {
                return Err(Error::Invalid(format!("two shared {:?} backends configured", b.role)));
            }
        }
        let mut ids = std::collections::BTreeSet::new();
        for a in &self.agents {
            if a.agent_id.trim().is_empty() || a.agent_id.contains(['/', '\\']) {
                return Err(Error::Invalid(format!("invalid agent id {:?}", a.agent_id)));
            }
            if a.agent_id.starts_with("human-") {
                return Err(Error::Invalid(format!("agent id {:?} collides with the human agents", a.agent_id)));
            }
            if !ids.insert(a.agent_id.as_str()) {
                return Err(Error::Invalid(format!("agent {:?} configured twice", a.agent_id)));
            }
            if a.describe.role != Role::Describe {
                return Err(Error::Invalid(format!("agent {}: backend role must be describe", a.agent_id)));
            }
            a.describe.validate()?;
        }
        if !(0.0..=1.0).contains(&self.prepare.segment_threshold) {
            return Err(Error::Invalid("segment_threshold must lie in [0,1]".into()));
        }
        self.prepare.preprocess.validate()?;
        if !matches!(self.map.normalization, Normalization::PerScene | Normalization::Global) {
            return Err(Error::Invalid("map normalization must be perscene or global".into()));
        }
        if self.human.participants_per_set == 0 {
            return Err(Error::Invalid("participants_per_set must be at least 1".into()));
        }
        if self.stats.n_iterations == 0 {
            return Err(Error::Invalid("stats n_iterations must be at least 1".into()));
        }
        self.bias.gbvs.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Prepare,
    Validate,
    Describe,
    Score,
    Map,
    HumanFilter,
    Consensus,
    Eval,
    Bias,
    Stats,
    Whitebox,
    Studyplan,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 13] = [
        Stage::Prepare,
        Stage::Validate,
        Stage::Describe,
        Stage::Score,
        Stage::Map,
        Stage::HumanFilter,
        Stage::Consensus,
        Stage::Eval,
        Stage::Bias,
        Stage::Stats,
        Stage::Whitebox,
        Stage::Studyplan,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Validate => "validate",
            Stage::Describe => "describe",
            Stage::Score => "score",
            Stage::Map => "map",
            Stage::HumanFilter => "human-filter",
            Stage::Consensus => "consensus",
            Stage::Eval => "eval",
            Stage::Bias => "bias",
            Stage::Stats => "stats",
            Stage::Whitebox => "whitebox",
            Stage::Studyplan => "studyplan",
            Stage::Report => "report",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown stage {s:?}")))
    }
}

/// Written to `<stage>/stage.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
    /// Items that failed while others succeeded; their results are missing.
    pub n_failed: usize,
    pub outputs: Vec<String>,
}

impl StageOutcome {
    pub fn is_partial(&self) -> bool {
        self.n_failed > 0
    }
}

pub struct Pipeline {
    cfg: RunConfig,
    base: PathBuf,
    out: PathBuf,
}

pub const STAGE_RECORD: &str = "stage.json";

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Every regular file under `dir`, as sorted `/`-separated relative paths.
fn walk(dir: &Path) -> Result<Vec<String>> {
    fn go(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = entry.map_err(|e| Error::io(dir, e))?.path();
            if p.is_dir() {
                go(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("walk stays under root");
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    if dir.is_dir() {
        go(dir, dir, &mut out)?;
    }
    out.sort();
    Ok(out)
}

/// Hash of a file, or of a directory's relative paths and file hashes.
fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut acc = String::new();
        for rel in walk(path)? {
            acc.push_str(&rel);
            acc.push(' ');
            acc.push_str(&hash_file(&path.join(&rel))?);
            acc.push('\n');
        }
        Ok(sha256_hex(acc.as_bytes()))
    } else {
        hash_file(path)
    }
}

fn config_hash<T: Serialize>(key: &T) -> String {
    sha256_hex(&serde_json::to_vec(key).expect("stage key serializes"))
}

impl Pipeline {
    /// `base` is the directory relative paths in `cfg` resolve against.
    pub fn new(cfg: RunConfig, base: &Path) -> Result<Self> {
        cfg.validate()?;
        let out = base.join(&cfg.output_dir);
        Ok(Self { cfg, base: base.to_path_buf(), out })
    }

    pub fn open(config_path: &Path) -> Result<Self> {
        let cfg = RunConfig::load(config_path)?;
        let base = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(cfg, &base)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    fn exec(&self) -> Execution {
        self.cfg.execution
    }

    /// Writes `config.json` and `config.sha256` into the output root.
    pub fn snapshot(&self) -> Result<()> {
        let bytes = self.cfg.to_json();
        write_atomic(&self.out.join("config.json"), &bytes)?;
        write_atomic(&self.out.join("config.sha256"), format!("{}\n", sha256_hex(&bytes)).as_bytes())
    }

    pub fn run(&self, stage: Stage) -> Result<StageOutcome> {
        self.snapshot()?;
        log::info!("stage {}", stage.name());
        match stage {
            Stage::Prepare => self.prepare(),
            Stage::Validate => self.validate_variants(),
            Stage::Describe => self.describe(),
            Stage::Score => self.score(),
            Stage::Map => self.map(),
            Stage::HumanFilter => self.human_filter(),
            Stage::Consensus => self.consensus(),
            Stage::Eval => self.eval(),
            Stage::Bias => self.bias(),
            Stage::Stats => self.stats(),
            Stage::Whitebox => self.whitebox(),
            Stage::Studyplan => self.studyplan(),
            Stage::Report => self.report(),
        }
    }

    /// Stages whose inputs the config provides, in dependency order.
    pub fn default_stages(&self) -> Vec<Stage> {
        let c = &self.cfg;
        Stage::ALL
            .into_iter()
            .filter(|s| match s {
                Stage::Prepare => c.manifest.is_none() && c.images.is_some(),
                Stage::Validate => c.validation.votes.is_some() || c.validation.reviews.is_some(),
                Stage::HumanFilter | Stage::Consensus => c.human.responses.is_some(),
                Stage::Whitebox => c.whitebox.stacks_dir.is_some(),
                _ => true,
            })
            .collect()
    }

    /// Runs `stages` in order, stopping at the first error.
    pub fn run_all(&self, stages: &[Stage]) -> Result<Vec<StageOutcome>> {
        stages.iter().map(|&s| self.run(s)).collect()
    }

    fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.name())
    }

    /// Hashes of named inputs; a missing input names the stage to run first.
    fn inputs(&self, named: &[(String, PathBuf)]) -> Result<BTreeMap<String, String>> {
        named
            .iter()
            .map(|(name, path)| {
                if !path.exists() {
                    return Err(Error::Invalid(format!("missing input {name}: {}", path.display())));
                }
                Ok((name.clone(), hash_path(path)?))
            })
            .collect()
    }

    /// Runs `body` unless the stage record shows identical config, inputs
    /// and outputs. The stage directory is cleared before `body` runs.
    fn execute<K: Serialize>(
        &self,
        stage: Stage,
        key: &K,
        inputs: BTreeMap<String, String>,
        body: impl FnOnce(&Path) -> Result<usize>,
    ) -> Result<StageOutcome> {
        let dir = self.stage_dir(stage);
        let record_path = dir.join(STAGE_RECORD);
        let config_hash = config_hash(key);
        if let Ok(bytes) = std::fs::read(&record_path) {
            if let Ok(prev) = serde_json::from_slice::<StageRecord>(&bytes) {
                let outputs_match = prev
                    .outputs
                    .iter()
                    .all(|(rel, h)| hash_file(&dir.join(rel)).map(|x| &x == h).unwrap_or(false));
                if prev.config_hash == config_hash && prev.inputs == inputs && outputs_match {
                    log::info!("{}: up to date, skipped", stage.name());
                    return Ok(StageOutcome {
                        stage,
                        skipped: true,
                        n_failed: prev.n_failed,
                        outputs: prev.outputs.into_keys().collect(),
                    });
                }
            }
        }
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let n_failed = body(&dir)?;
        let mut outputs = BTreeMap::new();
        for rel in walk(&dir)? {
            if rel != STAGE_RECORD {
                let h = hash_file(&dir.join(&rel))?;
                outputs.insert(rel, h);
            }
        }
        let record = StageRecord { stage: stage.name().into(), config_hash, inputs, outputs, n_failed };
        let mut bytes = serde_json::to_vec_pretty(&record).expect("stage record serializes");
        bytes.push(b'\n');
        write_atomic(&record_path, &bytes)?;
        Ok(StageOutcome { stage, skipped: false, n_failed, outputs: record.outputs.into_keys().collect() })
    }

    fn world(&self) -> Result<Option<Arc<MockWorld>>> {
        self.cfg
            .mock_world
            .as_ref()
            .map(|p| MockWorld::load(&self.resolve(p)).map(Arc::new))
            .transpose()
    }

    fn world_input(&self) -> Vec<(String, PathBuf)> {
        self.cfg.mock_world.iter().map(|p| ("mock_world".to_string(), self.resolve(p))).collect()
    }

    /// Shared backends for `roles`, with the describe role optionally
    /// replaced by an agent's backend. The run seed is added to each seed.
    fn gateway(&self, roles: &[Role], describe: Option<&BackendConfig>) -> Result<Gateway> {
        let mut configs: Vec<BackendConfig> = self
            .cfg
            .backends
            .iter()
            .filter(|b| roles.contains(&b.role) && !(describe.is_some() && b.role == Role::Describe))
            .cloned()
            .collect();
        configs.extend(describe.cloned());
        for c in &mut configs {
            c.seed = c.seed.wrapping_add(self.cfg.seed);
        }
        Gateway::connect(&configs, self.world()?)
    }

    /// The manifest the analysis stages read and the root its paths are
    /// relative to: a validated manifest if present, else the configured or
    /// prepared one.
    fn base_manifest(&self) -> (PathBuf, PathBuf) {
        match &self.cfg.manifest {
            Some(m) => {
                let m = self.resolve(m);
                let root = match &self.cfg.dataset_root {
                    Some(r) => self.resolve(r),
                    None => m.parent().map(Path::to_path_buf).unwrap_or_default(),
                };
                (m, root)
            }
            None => (self.stage_dir(Stage::Prepare).join("manifest.json"), self.stage_dir(Stage::Prepare)),
        }
    }

    fn manifest_source(&self) -> (PathBuf, PathBuf) {
        let (base, root) = self.base_manifest();
        let validated = self.stage_dir(Stage::Validate).join("manifest.json");
        if validated.exists() {
            (validated, root)
        } else {
            (base, root)
        }
    }

    fn load_set(&self) -> Result<SceneSet> {
        let (m, root) = self.manifest_source();
        if !m.exists() {
            return Err(Error::Invalid(format!("no manifest at {}; run prepare or set `manifest`", m.display())));
        }
        load_manifest(&m, Some(&root))
    }

    /// Digest over the manifest and every image it references.
    fn dataset_input(&self, set: &SceneSet) -> Result<(String, String)> {
        let (m, _) = self.manifest_source();
        let mut acc = hash_file(&m)?;
        for s in &set.scenes {
            acc.push_str(&hash_file(&set.resolve(&s.image_path))?);
            for v in &s.variants {
                acc.push_str(&hash_file(&set.resolve(&v.image_path))?);
            }
        }
        Ok(("dataset".into(), sha256_hex(acc.as_bytes())))
    }

    /// Css record files visible to analysis stages, sorted by name. Record
    /// files dropped into the score directory by hand count too.
    fn css_files(&self) -> Result<Vec<(String, PathBuf)>> {
        let mut files = Vec::new();
        let score = self.stage_dir(Stage::Score);
        for rel in walk(&score)? {
            if rel.ends_with(".csv") || rel.ends_with(".json") && rel != STAGE_RECORD {
                files.push((format!("score/{rel}"), score.join(rel)));
            }
        }
        let human = self.stage_dir(Stage::Consensus).join("css.csv");
        if human.exists() {
            files.push(("consensus/css.csv".into(), human));
        }
        if let Some(t) = &self.cfg.eval.truth_file {
            files.push(("truth".into(), self.resolve(t)));
        }
        Ok(files)
    }
}
