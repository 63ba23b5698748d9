use std::collections::HashMap;

use css_core::bias::Attribute;
use css_core::corr::{pearson, CorrKind};
use css_core::exec::Execution;
use css_core::stats::{bootstrap_bias_gap, driving_factor, permutation_null, AgentItems, ResampleConfig, Tail};
use css_core::synth::{attribute_table, driving_factor_population, items, null_pair, planted_css};
use css_core::util::replicate_rng;
use rand::seq::SliceRandom;
use rand::Rng;

fn cfg(n: usize, seed: u64) -> ResampleConfig {
    ResampleConfig { n_iterations: n, seed, tail: Tail::Auto }
}

#[test]
fn permutation_null_is_centered_with_expected_spread() {
    let n = 1306;
    let mut rng = replicate_rng(5, 0);
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let s = permutation_null(&x, &y, CorrKind::Spearman, &cfg(5000, 1), Execution::Parallel).unwrap();
    assert!(s.mean.abs() < 0.005, "mean {}", s.mean);
    assert!((0.022..=0.033).contains(&s.std), "std {}", s.std);
    assert_eq!(s.n_skipped, 0);
}

#[test]
fn permutation_null_matches_naive_shuffle() {
    let mut rng = replicate_rng(8, 0);
    let x: Vec<f64> = (0..40).map(|_| rng.random_range(0..6) as f64).collect();
    let y: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
    let flags: Vec<f64> = x.iter().map(|v| (*v > 2.0) as u8 as f64).collect();
    for (kind, xs) in [(CorrKind::Pearson, &x), (CorrKind::Spearman, &x), (CorrKind::PointBiserial, &flags)] {
        let c = cfg(200, 3);
        let s = permutation_null(xs, &y, kind, &c, Execution::Sequential).unwrap();
        for b in 0..c.n_iterations {
            let mut perm: Vec<usize> = (0..xs.len()).collect();
            perm.shuffle(&mut replicate_rng(c.seed, b as u64));
            let shuffled: Vec<f64> = perm.iter().map(|&j| xs[j]).collect();
            let naive = kind.compute(&shuffled, &y).unwrap();
            assert!((naive - s.distribution[b]).abs() < 1e-12, "{kind:?} replicate {b}");
        }
        let k = s.distribution.iter().filter(|&&r| if s.tail == Tail::Less { r <= s.observed } else { r >= s.observed }).count();
        assert_eq!(s.p, (k as f64 + 1.0) / (c.n_iterations as f64 + 1.0));
    }
}

#[test]
fn permutation_p_is_near_half_for_zero_correlation() {
    // y = x² on a grid symmetric about zero is uncorrelated with x.
    let x: Vec<f64> = (0..200).map(|i| i as f64 - 99.5).collect();
    let y: Vec<f64> = x.iter().map(|v| v * v).collect();
    assert!(pearson(&x, &y).unwrap().abs() < 1e-12);
    let s = permutation_null(&x, &y, CorrKind::Pearson, &cfg(4000, 2), Execution::Parallel).unwrap();
    assert!((s.p - 0.5).abs() < 0.05, "p {}", s.p);
}

#[test]
fn bootstrap_of_identical_data_gives_half() {
    let rows = attribute_table(300, 4);
    let css = planted_css(&rows, 0.5, 0.0, 4, 1);
    let a = items("model", &rows, css.clone());
    let b = items("human", &rows, css);
    let s = bootstrap_bias_gap(&a, &b, Attribute::Size, &cfg(500, 1), Execution::Parallel).unwrap();
    assert_eq!(s.observed, 0.0);
    assert!(s.distribution.iter().all(|d| *d == 0.0));
    assert!((s.p - 0.5).abs() < 0.01, "p {}", s.p);
}

#[test]
fn bootstrap_detects_planted_size_bias() {
    let rows = attribute_table(400, 6);
    let model = items("model", &rows, rows.iter().map(|r| r.size as f64).collect());
    let human = items("human", &rows, planted_css(&rows, 0.0, 0.0, 6, 1));
    let s = bootstrap_bias_gap(&model, &human, Attribute::Size, &cfg(2000, 1), Execution::Parallel).unwrap();
    assert!(s.observed > 0.8);
    assert!(s.p < 0.001, "p {}", s.p);
    assert_eq!(s.tail, Tail::Greater);
}

#[test]
fn bootstrap_p_is_roughly_uniform_under_the_null() {
    let mut rejections = 0;
    let n_sims = 200;
    for sim in 0..n_sims {
        let (m, h) = null_pair(120, 0.5, 1000 + sim);
        let c = ResampleConfig { n_iterations: 200, seed: sim, tail: Tail::Greater };
        let s = bootstrap_bias_gap(&m, &h, Attribute::Size, &c, Execution::Parallel).unwrap();
        if s.p < 0.05 {
            rejections += 1;
        }
    }
    let rate = rejections as f64 / n_sims as f64;
    assert!(rate < 0.12, "rejection rate {rate}");
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let (m, h) = null_pair(150, 0.4, 9);
    let c = cfg(300, 12);
    let a = bootstrap_bias_gap(&m, &h, Attribute::Center, &c, Execution::Parallel).unwrap();
    let b = bootstrap_bias_gap(&m, &h, Attribute::Center, &c, Execution::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.distribution, b.distribution);
    let x = m.attribute(Attribute::Person);
    let a = permutation_null(&x, &m.css, CorrKind::PointBiserial, &c, Execution::Parallel).unwrap();
    let b = permutation_null(&x, &m.css, CorrKind::PointBiserial, &c, Execution::Sequential).unwrap();
    assert_eq!(a.distribution, b.distribution);
}

#[test]
fn driving_factor_recovers_planted_relation() {
    let (agents, human) = driving_factor_population(19, 800, 21);
    let c = cfg(1000, 7);
    let size = driving_factor(&agents, &human, Attribute::Size, &c, Execution::Parallel).unwrap();
    assert!(size.null.observed <= -0.9, "corr {}", size.null.observed);
    assert!(size.null.p < 0.01, "p {}", size.null.p);
    assert!(size.spearman.unwrap() < -0.8);
    let center = driving_factor(&agents, &human, Attribute::Center, &c, Execution::Parallel).unwrap();
    assert!(center.null.p > 0.2, "center p {} corr {}", center.null.p, center.null.observed);
    let row = size.row();
    assert_eq!(row.delta_r_type, "size");
    assert_eq!(row.n_agents, 19);
}

/// Direct recomputation of the driving-factor null: shuffle the attribute
/// column of the human table, rejoin every agent by key and correlate.
fn naive_driving_null(agents: &[AgentItems], human: &AgentItems, attribute: Attribute, c: &ResampleConfig) -> Vec<f64> {
    let table = &human.items.rows;
    let n = table.len();
    let kind = attribute.corr_kind();
    let dacc: Vec<f64> = agents.iter().map(|a| a.top1_accuracy - human.top1_accuracy).collect();
    (0..c.n_iterations)
        .map(|b| {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut replicate_rng(c.seed, b as u64));
            let mut shuffled = HashMap::new();
            for (i, r) in table.iter().enumerate() {
                shuffled.insert((r.scene_id.clone(), r.object_id.clone()), attribute.value(&table[perm[i]]));
            }
            let human_css: HashMap<_, _> =
                table.iter().zip(&human.items.css).map(|(r, c)| ((r.scene_id.clone(), r.object_id.clone()), *c)).collect();
            let deltas: Vec<f64> = agents
                .iter()
                .map(|a| {
                    let keys: Vec<_> = a.items.rows.iter().map(|r| (r.scene_id.clone(), r.object_id.clone())).collect();
                    let xs: Vec<f64> = keys.iter().map(|k| shuffled[k]).collect();
                    let hs: Vec<f64> = keys.iter().map(|k| human_css[k]).collect();
                    kind.compute(&xs, &a.items.css).unwrap() - kind.compute(&xs, &hs).unwrap()
                })
                .collect();
            pearson(&deltas, &dacc).unwrap()
        })
        .collect()
}

#[test]
fn driving_factor_null_matches_naive_recomputation() {
    let (mut agents, human) = driving_factor_population(5, 120, 3);
    let c = cfg(60, 2);
    for attribute in Attribute::ALL {
        let fast = driving_factor(&agents, &human, attribute, &c, Execution::Sequential).unwrap();
        let naive = naive_driving_null(&agents, &human, attribute, &c);
        for (a, b) in fast.null.distribution.iter().zip(&naive) {
            assert!((a - b).abs() < 1e-10, "{attribute:?}: {a} vs {b}");
        }
    }
    // Agents missing items take the general path.
    for a in agents.iter_mut().step_by(2) {
        a.items.rows.truncate(100);
        a.items.css.truncate(100);
    }
    for attribute in Attribute::ALL {
        let slow = driving_factor(&agents, &human, attribute, &c, Execution::Parallel).unwrap();
        let naive = naive_driving_null(&agents, &human, attribute, &c);
        for (a, b) in slow.null.distribution.iter().zip(&naive) {
            assert!((a - b).abs() < 1e-10, "{attribute:?}: {a} vs {b}");
        }
    }
}
