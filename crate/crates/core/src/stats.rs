//! Resampling tests: paired bootstrap for model-vs-human bias gaps,
//! permutation nulls for bias correlations, and the driving-factor analysis
//! relating per-agent bias gaps to accuracy gaps.
//!
//! Replicate `b` draws from `replicate_rng(seed, b)`, so parallel and
//! sequential runs give bit-identical summaries.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bias::{correlation, pair_items, Attribute, JoinedItems};
use crate::corr::{mid_ranks, pearson, spearman, CorrKind, Undefined};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::store::Record;
use crate::util::{replicate_rng, sig6};

pub const DEFAULT_ITERATIONS: usize = 10_000;

/// Direction of the one-sided alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tail {
    /// The direction of the observed statistic (positive when it is zero).
    #[default]
    Auto,
    Greater,
    Less,
}

impl Tail {
    fn resolve(self, observed: f64) -> Tail {
        match self {
            Tail::Auto if observed < 0.0 => Tail::Less,
            Tail::Auto => Tail::Greater,
            t => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleConfig {
    pub n_iterations: usize,
    pub seed: u64,
    #[serde(default)]
    pub tail: Tail,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self { n_iterations: DEFAULT_ITERATIONS, seed: 0, tail: Tail::Auto }
    }
}

impl ResampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(Error::Invalid("n_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSummary {
    pub observed: f64,
    pub mean: f64,
    pub std: f64,
    pub p: f64,
    pub tail: Tail,
    pub n_iterations: usize,
    /// Replicates dropped because the statistic was undefined on them.
    pub n_skipped: usize,
    /// The resampled statistics, in replicate order.
    #[serde(skip)]
    pub distribution: Vec<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, v.sqrt())
}

fn summarize(observed: f64, tail: Tail, n_iterations: usize, draws: Vec<Option<f64>>, p_of: impl Fn(Tail, &[f64]) -> f64) -> Result<NullSummary> {
    let distribution: Vec<f64> = draws.into_iter().flatten().collect();
    let n_skipped = n_iterations - distribution.len();
    if distribution.is_empty() {
        return Err(Undefined("every replicate was degenerate".into()).into());
    }
    if n_skipped * 100 > n_iterations {
        log::warn!("{n_skipped} of {n_iterations} replicates skipped as degenerate");
    }
    let (mean, std) = mean_std(&distribution);
    let tail = tail.resolve(observed);
    let p = p_of(tail, &distribution);
    Ok(NullSummary { observed, mean, std, p, tail, n_iterations, n_skipped, distribution })
}

/// Paired bootstrap of `r_model − r_human` for one attribute. The p-value is
/// the smoothed fraction of replicates whose difference contradicts the
/// alternative, `(k + 1) / (n + 1)`, with exact zeros counted as half.
pub fn bootstrap_bias_gap(
    model: &JoinedItems,
    human: &JoinedItems,
    attribute: Attribute,
    cfg: &ResampleConfig,
    exec: Execution,
) -> Result<NullSummary> {
    cfg.validate()?;
    let (m, h) = pair_items(model, human);
    let n = m.len();
    if n < 3 {
        return Err(Error::Invalid(format!("bootstrap needs at least 3 paired items, got {n}")));
    }
    let x = m.attribute(attribute);
    let kind = attribute.corr_kind();
    let observed = kind.compute(&x, &m.css)? - kind.compute(&x, &h.css)?;
    let draws = exec.map_range(cfg.n_iterations, |b| {
        let mut rng = replicate_rng(cfg.seed, b as u64);
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        let ms: Vec<f64> = idx.iter().map(|&i| m.css[i]).collect();
        let hs: Vec<f64> = idx.iter().map(|&i| h.css[i]).collect();
        match (kind.compute(&xs, &ms), kind.compute(&xs, &hs)) {
            (Ok(a), Ok(b)) => Some(a - b),
            _ => None,
        }
    });
    summarize(observed, cfg.tail, cfg.n_iterations, draws, |tail, dist| {
        let mut k = 0.0;
        for &d in dist {
            let contradicts = match tail {
                Tail::Less => d > 0.0,
                _ => d < 0.0,
            };
            if contradicts {
                k += 1.0;
            } else if d == 0.0 {
                k += 0.5;
            }
        }
        (k + 1.0) / (dist.len() as f64 + 1.0)
    })
}

/// Values fed to Pearson so that a correlation of kind `kind` results.
fn transform(kind: CorrKind, v: &[f64]) -> Vec<f64> {
    match kind {
        CorrKind::Spearman => mid_ranks(v),
        CorrKind::PointBiserial => v.iter().map(|&x| (x != 0.0) as u8 as f64).collect(),
        CorrKind::Pearson => v.to_vec(),
    }
}

/// Transform for the continuous (css) side: ranked only for Spearman.
fn transform_y(kind: CorrKind, v: &[f64]) -> Vec<f64> {
    match kind {
        CorrKind::Spearman => mid_ranks(v),
        _ => v.to_vec(),
    }
}

/// Pearson correlation against a fixed vector whose centered values and sum
/// of squares are precomputed. `x` may be any permutation of one vector, so
/// its sum of squares is fixed too.
struct FixedPearson {
    yc: Vec<f64>,
    denom: f64,
}

impl FixedPearson {
    fn new(x: &[f64], y: &[f64]) -> std::result::Result<Self, Undefined> {
        let my = y.iter().sum::<f64>() / y.len() as f64;
        let mx = x.iter().sum::<f64>() / x.len() as f64;
        let yc: Vec<f64> = y.iter().map(|v| v - my).collect();
        let syy: f64 = yc.iter().map(|v| v * v).sum();
        let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
        if syy == 0.0 || sxx == 0.0 {
            return Err(Undefined("constant input".into()));
        }
        Ok(Self { yc, denom: (sxx * syy).sqrt() })
    }

    /// Correlation with `x[perm[i]]` at position `i`.
    fn corr(&self, x: &[f64], perm: &[usize]) -> f64 {
        let s: f64 = perm.iter().zip(&self.yc).map(|(&j, y)| x[j] * y).sum();
        (s / self.denom).clamp(-1.0, 1.0)
    }
}

fn permutation(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut replicate_rng(seed, b as u64));
    perm
}

fn permutation_p(observed: f64) -> impl Fn(Tail, &[f64]) -> f64 {
    move |tail, dist| {
        let k = dist
            .iter()
            .filter(|&&r| match tail {
                Tail::Less => r <= observed,
                _ => r >= observed,
            })
            .count();
        (k as f64 + 1.0) / (dist.len() as f64 + 1.0)
    }
}

/// Null distribution of the correlation between shuffled attribute labels
/// and fixed css values.
pub fn permutation_null(
    attribute_values: &[f64],
    css_values: &[f64],
    kind: CorrKind,
    cfg: &ResampleConfig,
    exec: Execution,
) -> Result<NullSummary> {
    cfg.validate()?;
    let observed = kind.compute(attribute_values, css_values)?;
    let tx = transform(kind, attribute_values);
    let ty = transform_y(kind, css_values);
    let fixed = FixedPearson::new(&tx, &ty)?;
    let n = tx.len();
    let draws = exec.map_range(cfg.n_iterations, |b| Some(fixed.corr(&tx, &permutation(n, cfg.seed, b))));
    summarize(observed, cfg.tail, cfg.n_iterations, draws, permutation_p(observed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub agent_id: String,
    #[serde(with = "sig6::opt")]
    pub delta_r_size: Option<f64>,
    #[serde(with = "sig6::opt")]
    pub delta_r_center: Option<f64>,
    #[serde(with = "sig6::opt")]
    pub delta_r_lowlevel: Option<f64>,
    #[serde(with = "sig6::opt")]
    pub delta_r_person: Option<f64>,
    #[serde(with = "sig6")]
    pub delta_acc: f64,
}

impl Record for GapRecord {
    const KIND: &'static str = "gaps";
    const COLUMNS: &'static [&'static str] =
        &["agent_id", "delta_r_size", "delta_r_center", "delta_r_lowlevel", "delta_r_person", "delta_acc"];
}

impl GapRecord {
    pub fn delta_r(&self, a: Attribute) -> Option<f64> {
        match a {
            Attribute::Size => self.delta_r_size,
            Attribute::Center => self.delta_r_center,
            Attribute::Lowlevel => self.delta_r_lowlevel,
            Attribute::Person => self.delta_r_person,
        }
    }
}

/// Item-level data for one agent in the driving-factor analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentItems {
    pub items: JoinedItems,
    pub top1_accuracy: f64,
}

/// Model-minus-human bias correlations and accuracy, on the items both cover.
pub fn gap_record(agent: &AgentItems, human: &AgentItems) -> GapRecord {
    let (m, h) = pair_items(&agent.items, &human.items);
    let d = |a: Attribute| match (correlation(&m, a), correlation(&h, a)) {
        (Ok(x), Ok(y)) => Some(x - y),
        _ => None,
    };
    GapRecord {
        agent_id: agent.items.agent_id.clone(),
        delta_r_size: d(Attribute::Size),
        delta_r_center: d(Attribute::Center),
        delta_r_lowlevel: d(Attribute::Lowlevel),
        delta_r_person: d(Attribute::Person),
        delta_acc: agent.top1_accuracy - human.top1_accuracy,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingFactor {
    pub attribute: Attribute,
    pub n_agents: usize,
    pub gaps: Vec<GapRecord>,
    /// Pearson correlation of Δr with ΔAcc, with its permutation null.
    pub null: NullSummary,
    /// Spearman correlation of Δr with ΔAcc, reported alongside.
    pub spearman: Option<f64>,
}

/// Per-agent state for recomputing Δr under a shared permutation of the
/// attribute column.
struct AgentState {
    /// Row of the global attribute table behind each paired item.
    global: Vec<usize>,
    /// Precomputed correlations when the agent covers the whole table, so a
    /// permuted attribute is a permutation of the global transformed column.
    fast: Option<(FixedPearson, FixedPearson)>,
    model_css: Vec<f64>,
    human_css: Vec<f64>,
}

/// Correlation across agents between Δr(attribute) and ΔAcc, with a null
/// built by permuting the attribute column of the shared item table and
/// recomputing every agent's Δr.
pub fn driving_factor(
    agents: &[AgentItems],
    human: &AgentItems,
    attribute: Attribute,
    cfg: &ResampleConfig,
    exec: Execution,
) -> Result<DrivingFactor> {
    cfg.validate()?;
    if agents.len() < 3 {
        return Err(Error::Invalid(format!("driving-factor analysis needs at least 3 agents, got {}", agents.len())));
    }
    let gaps: Vec<GapRecord> = agents.iter().map(|a| gap_record(a, human)).collect();
    let mut dr = Vec::with_capacity(agents.len());
    for g in &gaps {
        dr.push(g.delta_r(attribute).ok_or_else(|| {
            Undefined(format!("{}: Δr_{} undefined", g.agent_id, attribute.name()))
        })?);
    }
    let dacc: Vec<f64> = gaps.iter().map(|g| g.delta_acc).collect();
    let observed = pearson(&dr, &dacc)?;
    let spearman_obs = spearman(&dr, &dacc).ok();

    let table = &human.items.rows;
    let key_index: std::collections::HashMap<(&str, &str), usize> =
        table.iter().enumerate().map(|(i, r)| ((r.scene_id.as_str(), r.object_id.as_str()), i)).collect();
    let kind = attribute.corr_kind();
    let global_x: Vec<f64> = table.iter().map(|r| attribute.value(r)).collect();
    let global_tx = transform(kind, &global_x);
    let n = table.len();
    let mut states = Vec::with_capacity(agents.len());
    for a in agents {
        let (m, h) = pair_items(&a.items, &human.items);
        let global: Vec<usize> = m
            .rows
            .iter()
            .map(|r| key_index[&(r.scene_id.as_str(), r.object_id.as_str())])
            .collect();
        let fast = if global.len() == n {
            let my = transform_y(kind, &m.css);
            let hy = transform_y(kind, &h.css);
            Some((FixedPearson::new(&global_tx, &my)?, FixedPearson::new(&global_tx, &hy)?))
        } else {
            None
        };
        states.push(AgentState { global, fast, model_css: m.css, human_css: h.css });
    }

    let draws = exec.map_range(cfg.n_iterations, |b| {
        let perm = permutation(n, cfg.seed, b);
        let mut deltas = Vec::with_capacity(states.len());
        for s in &states {
            let d = match &s.fast {
                Some((model, hum)) => {
                    let p: Vec<usize> = s.global.iter().map(|&g| perm[g]).collect();
                    model.corr(&global_tx, &p) - hum.corr(&global_tx, &p)
                }
                None => {
                    let xs: Vec<f64> = s.global.iter().map(|&g| global_x[perm[g]]).collect();
                    match (kind.compute(&xs, &s.model_css), kind.compute(&xs, &s.human_css)) {
                        (Ok(a), Ok(c)) => a - c,
                        _ => return None,
                    }
                }
            };
            deltas.push(d);
        }
        pearson(&deltas, &dacc).ok()
    });
    let null = summarize(observed, cfg.tail, cfg.n_iterations, draws, permutation_p(observed))?;
    Ok(DrivingFactor { attribute, n_agents: agents.len(), gaps, null, spearman: spearman_obs })
}

/// One row of the driving-factor table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingFactorRow {
    pub delta_r_type: String,
    #[serde(with = "sig6")]
    pub corr: f64,
    #[serde(with = "sig6")]
    pub null_mean: f64,
    #[serde(with = "sig6")]
    pub null_std: f64,
    #[serde(with = "sig6")]
    pub p: f64,
    #[serde(with = "sig6::opt")]
    pub spearman: Option<f64>,
    pub n_agents: usize,
    pub n_iterations: usize,
}

impl Record for DrivingFactorRow {
    const KIND: &'static str = "driving_factors";
    const COLUMNS: &'static [&'static str] =
        &["delta_r_type", "corr", "null_mean", "null_std", "p", "spearman", "n_agents", "n_iterations"];
}

impl DrivingFactor {
    pub fn row(&self) -> DrivingFactorRow {
        DrivingFactorRow {
            delta_r_type: self.attribute.name().to_string(),
            corr: self.null.observed,
            null_mean: self.null.mean,
            null_std: self.null.std,
            p: self.null.p,
            spearman: self.spearman,
            n_agents: self.n_agents,
            n_iterations: self.null.n_iterations,
        }
    }
}

/// Bootstrap outcome for one (agent, attribute).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRow {
    pub agent_id: String,
    pub attribute: String,
    #[serde(with = "sig6")]
    pub delta_r: f64,
    #[serde(with = "sig6")]
    pub p: f64,
    pub tail: Tail,
    pub n_iterations: usize,
    pub n_skipped: usize,
}

impl Record for BootstrapRow {
    const KIND: &'static str = "bootstrap";
    const COLUMNS: &'static [&'static str] = &["agent_id", "attribute", "delta_r", "p", "tail", "n_iterations", "n_skipped"];
}

/// Permutation-null outcome for one (agent, attribute).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationRow {
    pub agent_id: String,
    pub attribute: String,
    #[serde(with = "sig6")]
    pub observed: f64,
    #[serde(with = "sig6")]
    pub null_mean: f64,
    #[serde(with = "sig6")]
    pub null_std: f64,
    #[serde(with = "sig6")]
    pub p: f64,
    pub n_iterations: usize,
}

impl Record for PermutationRow {
    const KIND: &'static str = "permutation";
    const COLUMNS: &'static [&'static str] =
        &["agent_id", "attribute", "observed", "null_mean", "null_std", "p", "n_iterations"];
}
