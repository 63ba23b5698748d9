//! Synthetic data: attribute tables with planted css dependencies, agent
//! populations for the driving-factor analysis, and image scenes for the
//! mock backends.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::bias::{pair_items, AttributeRow, JoinedItems};
use crate::corr::mid_ranks;
use crate::stats::{gap_record, AgentItems};
use crate::util::replicate_rng;

pub mod scenes;

/// Standard normal draw (Box-Muller).
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// `n` attribute rows, four objects per scene, with independent random
/// attributes.
pub fn attribute_table(n: usize, seed: u64) -> Vec<AttributeRow> {
    let mut rng = replicate_rng(seed, 0);
    (0..n)
        .map(|i| AttributeRow {
            scene_id: format!("s{:04}", i / 4),
            object_id: format!("o{i:05}"),
            label: String::new(),
            size: rng.random_range(50..5000),
            centeredness: -rng.random_range(0.0..200.0),
            lowlevel: rng.random_range(0.0..1.0),
            person: rng.random::<f64>() < 0.3,
            gbvs_hash: "synthetic".into(),
        })
        .collect()
}

pub fn items(agent_id: &str, rows: &[AttributeRow], css: Vec<f64>) -> JoinedItems {
    assert_eq!(rows.len(), css.len());
    JoinedItems { agent_id: agent_id.to_string(), rows: rows.to_vec(), css }
}

/// Rank-based z-scores of one attribute.
pub fn standardized(values: &[f64]) -> Vec<f64> {
    let r = mid_ranks(values);
    let n = r.len() as f64;
    let m = (n + 1.0) / 2.0;
    let sd = (r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    r.into_iter().map(|v| (v - m) / sd).collect()
}

/// css = Σ strength·z(attribute) + noise with variance `1 − Σ strength²`, so
/// each correlation is close to its strength. Noise comes from stream `stream`.
pub fn planted_css(rows: &[AttributeRow], size: f64, center: f64, seed: u64, stream: u64) -> Vec<f64> {
    let sd = (1.0 - size * size - center * center).max(0.0).sqrt();
    let zs = standardized(&rows.iter().map(|r| r.size as f64).collect::<Vec<_>>());
    let zc = standardized(&rows.iter().map(|r| r.centeredness).collect::<Vec<_>>());
    let mut rng = replicate_rng(seed, stream);
    (0..rows.len()).map(|i| size * zs[i] + center * zc[i] + sd * normal(&mut rng)).collect()
}

/// Agents whose size-bias strength grows linearly with their index and whose
/// accuracy gap is `−Δr_size` plus noise with standard deviation
/// `0.05 · range(Δr_size)`. Their centeredness strength follows a pattern
/// symmetric in the index, so Δr_center varies across agents without
/// tracking the accuracy gap.
pub fn driving_factor_population(
    n_agents: usize,
    n_items: usize,
    seed: u64,
) -> (Vec<AgentItems>, AgentItems) {
    let rows = attribute_table(n_items, seed);
    let human = AgentItems { items: items("human", &rows, planted_css(&rows, 0.3, 0.3, seed, 1)), top1_accuracy: 0.73 };
    let half = (n_agents as f64 - 1.0) / 2.0;
    let mut agents: Vec<AgentItems> = (0..n_agents)
        .map(|k| {
            let u = (k as f64 - half) / half;
            let size = 0.1 + 0.6 * k as f64 / (n_agents - 1) as f64;
            let center = 0.1 + 0.4 * u * u;
            let css = planted_css(&rows, size, center, seed, 100 + k as u64);
            AgentItems { items: items(&format!("agent{k:02}"), &rows, css), top1_accuracy: 0.0 }
        })
        .collect();
    let dr: Vec<f64> = agents
        .iter()
        .map(|a| gap_record(a, &human).delta_r_size.expect("size correlation defined"))
        .collect();
    let range = dr.iter().copied().fold(f64::MIN, f64::max) - dr.iter().copied().fold(f64::MAX, f64::min);
    let mut rng = replicate_rng(seed, 99);
    for (a, d) in agents.iter_mut().zip(&dr) {
        a.top1_accuracy = human.top1_accuracy - d + 0.05 * range * normal(&mut rng);
    }
    (agents, human)
}

/// Paired model and human items drawn from the same generative process with
/// independent noise: a true null for the bias-gap bootstrap.
pub fn null_pair(n_items: usize, strength: f64, seed: u64) -> (JoinedItems, JoinedItems) {
    let rows = attribute_table(n_items, seed);
    let human = items("human", &rows, planted_css(&rows, strength, 0.0, seed, 1));
    let model = items("model", &rows, planted_css(&rows, strength, 0.0, seed, 2));
    pair_items(&model, &human)
}
