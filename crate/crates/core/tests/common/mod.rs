//! Checks shared by the acceptance harness and the oracle tests. Each returns
//! a short detail line on success and the reason on failure.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use css_core::alignment::AlignmentSummary;
use css_core::bias::Attribute;
use css_core::corr::{kendall_tau_b, point_biserial, spearman, CorrKind};
use css_core::css::css_score;
use css_core::exec::Execution;
use css_core::gateway::{Embedder, Image, MockEmbedder};
use css_core::gbvs::{self, GbvsConfig, MarkovChain};
use css_core::human::FilterSummary;
use css_core::mask::{dilate, preprocess, BitMask, PreprocessParams};
use css_core::pipeline::{Pipeline, RunConfig, Stage, Table1Row};
use css_core::stats::{bootstrap_bias_gap, driving_factor, permutation_null, ResampleConfig, Tail};
use css_core::store::read_records;
use css_core::synth::scenes::{generate, SynthConfig};
use css_core::synth::{driving_factor_population, null_pair};
use css_core::util::replicate_rng;
use image::Rgb;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- css ----

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum()
}

pub fn css_double_loop(f: &[Vec<f64>], c: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for a in f {
        for b in c {
            total += cos(a, b);
        }
    }
    1.0 - total / (f.len() * c.len()) as f64
}

pub fn css_oracle() -> Check {
    let mut worst = 0.0f64;
    for s in 0..200u64 {
        let mut rng = replicate_rng(s, 17);
        let dim = rng.random_range(2..=64);
        let mut set = |k: usize| -> Vec<Vec<f64>> {
            (0..k)
                .map(|_| {
                    let v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                    if v.iter().all(|x| *x == 0.0) { vec![1.0; dim] } else { v }
                })
                .collect()
        };
        let (kf, kc) = (1 + (s as usize % 7), 1 + (s as usize / 7 % 5));
        let (f, c) = (set(kf), set(kc));
        let got = css_score(&f, &c).map_err(|e| e.to_string())?;
        worst = worst.max((got - css_double_loop(&f, &c)).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;

    // Identical descriptions: every random vector, every mock embedding.
    let e = MockEmbedder::new(256, 0);
    for s in 0..200u64 {
        let mut rng = replicate_rng(s, 18);
        let dim = rng.random_range(2..=64);
        let v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        let k = rng.random_range(1..=6);
        let same = vec![v; k];
        let got = css_score(&same, &same).map_err(|e| e.to_string())?;
        ensure(got == 0.0, || format!("identical random set gave {got:e}"))?;
        let text: Vec<String> = (0..rng.random_range(1..9)).map(|i| format!("w{}", rng.random_range(0..40) + i)).collect();
        let emb = e.embed(&vec![text.join(" "); k]).map_err(|e| e.to_string())?;
        let got = css_score(&emb, &emb).map_err(|e| e.to_string())?;
        ensure(got == 0.0, || format!("identical embedded set gave {got:e}"))?;
    }
    // Orthogonal sets: disjoint supports.
    for s in 0..50u64 {
        let mut rng = replicate_rng(s, 19);
        let dim = 2 * rng.random_range(1..=32);
        let half = |lo: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..dim).map(|i| if (i >= lo) == (i < lo + dim / 2) { rng.random::<f64>() + 0.01 } else { 0.0 }).collect()
        };
        let f: Vec<Vec<f64>> = (0..3).map(|_| half(0, &mut rng)).collect();
        let c: Vec<Vec<f64>> = (0..4).map(|_| half(dim / 2, &mut rng)).collect();
        let got = css_score(&f, &c).map_err(|e| e.to_string())?;
        ensure(got == 1.0, || format!("orthogonal sets gave {got}"))?;
    }
    let e1 = MockEmbedder::new(256, 0).embed(&["red apple".into(), "blue car".into()]).unwrap();
    if e1[0].iter().zip(&e1[1]).all(|(a, b)| a * b == 0.0) {
        ensure(css_score(&e1[..1], &e1[1..]).unwrap() == 1.0, || "disjoint vocabularies".into())?;
    }
    Ok(format!("200 random sets within {worst:.1e}; identical = 0, orthogonal = 1 exactly"))
}

// ---- correlations ----

fn brute_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

/// Rank = number of smaller values + (number of equal values + 1) / 2.
fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let less = x.iter().filter(|w| *w < v).count() as f64;
            let equal = x.iter().filter(|w| *w == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn brute_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let sign = |d: f64| (d > 0.0) as i64 - (d < 0.0) as i64;
    let (mut s, mut tx, mut ty) = (0i64, 0i64, 0i64);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            s += sign(x[i] - x[j]) * sign(y[i] - y[j]);
            tx += (x[i] == x[j]) as i64;
            ty += (y[i] == y[j]) as i64;
        }
    }
    // Ordered pairs count each unordered pair twice.
    let pairs = (n * (n - 1)) as i64;
    let denom = (((pairs - tx) * (pairs - ty)) as f64).sqrt();
    (denom > 0.0).then(|| s as f64 / denom)
}

fn agree(what: &str, got: Result<f64, css_core::corr::Undefined>, want: Option<f64>, worst: &mut f64) -> Result<(), String> {
    match (got, want) {
        (Ok(g), Some(w)) => {
            *worst = worst.max((g - w).abs());
            ensure((g - w).abs() <= 1e-12, || format!("{what}: {g} vs oracle {w}"))
        }
        (Err(_), None) => Ok(()),
        (g, w) => Err(format!("{what}: defined-ness differs ({g:?} vs {w:?})")),
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn corr_case(x: &[f64], y: &[f64], worst: &mut f64) -> Result<(), String> {
    agree("tau-b", kendall_tau_b(x, y), brute_tau_b(x, y), worst)?;
    agree("spearman", spearman(x, y), brute_pearson(&brute_ranks(x), &brute_ranks(y)), worst)?;
    if x.len() >= 3 {
        let cut = x.iter().sum::<f64>() / x.len() as f64;
        let b: Vec<bool> = x.iter().map(|v| *v > cut).collect();
        let bx: Vec<f64> = b.iter().map(|&v| v as u8 as f64).collect();
        agree("point-biserial", point_biserial(&b, y), brute_pearson(&bx, y), worst)?;
        agree("point-biserial kind", CorrKind::PointBiserial.compute(&bx, y), brute_pearson(&bx, y), worst)?;
    }
    Ok(())
}

pub fn correlation_oracle() -> Check {
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    for n in 2..=6 {
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        for p in permutations(n) {
            let y: Vec<f64> = p.iter().map(|&i| i as f64 * 1.5 - 2.0).collect();
            corr_case(&x, &y, &mut worst)?;
            // Ties on the x side: collapse ranks pairwise.
            let xt: Vec<f64> = x.iter().map(|v| (v / 2.0).floor()).collect();
            corr_case(&xt, &y, &mut worst)?;
            cases += 2;
        }
    }
    for s in 0..500u64 {
        let mut rng = replicate_rng(s, 23);
        let n = rng.random_range(3..=40);
        let levels = rng.random_range(2..=5);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < 0.5 { rng.random_range(0..4) as f64 } else { rng.random::<f64>() })
            .collect();
        corr_case(&x, &y, &mut worst)?;
        cases += 1;
    }
    Ok(format!("{cases} inputs, max deviation {worst:.1e}"))
}

// ---- masks ----

fn disk_dilate_oracle(m: &BitMask, r: u32) -> BitMask {
    let on: Vec<(u32, u32)> = m.on_pixels().collect();
    let r2 = (r * r) as i64;
    BitMask::from_fn(m.width(), m.height(), m.label.clone(), |x, y| {
        on.iter().any(|&(a, b)| {
            let (dx, dy) = (a as i64 - x as i64, b as i64 - y as i64);
            dx * dx + dy * dy <= r2
        })
    })
}

fn remove_pixels(m: &BitMask, n: usize) -> BitMask {
    let mut out = m.clone();
    for (x, y) in m.on_pixels().take(n).collect::<Vec<_>>() {
        out.set(x, y, false);
    }
    out
}

fn conf(m: BitMask, c: f64) -> BitMask {
    m.with_confidence(c).expect("confidence in range")
}

pub fn mask_fixtures() -> Check {
    let (w, h) = (200u32, 120u32);
    let no_dilation = PreprocessParams { dilation_radius: 0, ..Default::default() };
    let run = |masks: &[BitMask], p: &PreprocessParams| preprocess(masks, (w, h), p).map_err(|e| e.to_string());

    // Duplicates: IoU 390/400 = 0.975 is dropped (lower confidence loses),
    // IoU 380/420 ≈ 0.905 survives.
    let cup = conf(BitMask::rect(w, h, "cup", 10, 10, 20, 20), 0.8);
    let near_copy = conf(remove_pixels(&BitMask::rect(w, h, "mug", 10, 10, 20, 20), 10), 0.9);
    let shifted = conf(BitMask::rect(w, h, "bowl", 11, 10, 20, 20), 0.7);
    let out = run(&[cup.clone(), near_copy.clone(), shifted.clone()], &no_dilation)?;
    let srcs: Vec<Vec<usize>> = out.iter().map(|p| p.sources.clone()).collect();
    ensure(srcs == vec![vec![1], vec![2]], || format!("dedup kept {srcs:?}"))?;
    ensure(out[0].mask == near_copy && out[1].mask == shifted, || "dedup changed pixels".into())?;

    // Label-aware transitive merge: candles at gaps 25 and 25 (ends 55 apart)
    // form one cluster; a candle exactly 30 px away and a dog 5 px away stay apart.
    let c1 = BitMask::rect(w, h, "candle", 10, 60, 5, 5);
    let c2 = BitMask::rect(w, h, "candle", 40, 60, 5, 5);
    let c3 = BitMask::rect(w, h, "Candle ", 70, 60, 5, 5);
    let far = BitMask::rect(w, h, "candle", 105, 60, 5, 5);
    let dog = BitMask::rect(w, h, "dog", 80, 60, 5, 5);
    let out = run(&[c1.clone(), c2.clone(), c3.clone(), far.clone(), dog.clone()], &no_dilation)?;
    let srcs: Vec<Vec<usize>> = out.iter().map(|p| p.sources.clone()).collect();
    ensure(srcs == vec![vec![0, 1, 2], vec![3], vec![4]], || format!("merge groups {srcs:?}"))?;
    let union = c1.union(&c2).unwrap().union(&c3).unwrap();
    ensure(out[0].mask.bits() == union.bits(), || "merged mask is not the union".into())?;
    ensure(out[1].mask == far && out[2].mask == dog, || "unmerged masks changed".into())?;

    // Area: exactly 30% stays, one pixel more goes.
    let limit = (w * h) as usize * 3 / 10;
    let at_limit = BitMask::from_fn(w, h, "wall", |x, y| ((y * w + x) as usize) < limit);
    let over = BitMask::from_fn(w, h, "floor", |x, y| ((y * w + x) as usize) <= limit);
    let out = run(&[at_limit.clone()], &no_dilation)?;
    ensure(out.len() == 1 && out[0].mask == at_limit, || "30% mask dropped".into())?;
    ensure(run(&[over], &no_dilation)?.is_empty(), || "mask over 30% kept".into())?;

    // Dilation: a single pixel grows to the 81-pixel radius-5 disk; shapes
    // match a brute-force disk sweep, clipped at the border.
    let dot = BitMask::rect(w, h, "dot", 50, 50, 1, 1);
    let out = run(&[dot.clone()], &PreprocessParams::default())?;
    ensure(out[0].mask.area() == 81, || format!("dot dilated to {} px", out[0].mask.area()))?;
    for m in [dot, c1.clone(), BitMask::rect(w, h, "edge", 0, 0, 3, 7), union.clone()] {
        ensure(dilate(&m, 5).bits() == disk_dilate_oracle(&m, 5).bits(), || format!("dilation of {}", m.label))?;
    }

    // Whole pipeline: the order is dedup, merge, area filter, dilation.
    let big = BitMask::rect(w, h, "sky", 0, 0, 200, 40);
    let out = run(&[cup, near_copy.clone(), c1, c2, c3, big], &PreprocessParams::default())?;
    let srcs: Vec<Vec<usize>> = out.iter().map(|p| p.sources.clone()).collect();
    ensure(srcs == vec![vec![1], vec![2, 3, 4]], || format!("full pipeline groups {srcs:?}"))?;
    ensure(out[0].mask.bits() == disk_dilate_oracle(&near_copy, 5).bits(), || "full pipeline dedup pixels".into())?;
    ensure(out[1].mask.bits() == disk_dilate_oracle(&union, 5).bits(), || "full pipeline merge pixels".into())?;
    Ok("dedup, transitive merge, area drop and dilation pixel-exact".into())
}

// ---- gbvs ----

pub fn dense_stationary(chain: &MarkovChain) -> Vec<f64> {
    let n = chain.n;
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(j, i)] = chain.transition[i * n + j];
        }
        a[(i, i)] -= 1.0;
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    a.lu().solve(&b).expect("irreducible chain").iter().copied().collect()
}

pub fn disk_image(w: u32, h: u32, disks: &[(f64, f64, f64)], fg: [u8; 3], bg: [u8; 3]) -> Image {
    Image::from_fn(w, h, |x, y| {
        let inside = disks
            .iter()
            .any(|&(cx, cy, r)| (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2) <= r * r);
        Rgb(if inside { fg } else { bg })
    })
}

pub fn gbvs_numerics() -> Check {
    // Random chains against the dense solve.
    let mut worst = 0.0f64;
    for s in 0..100u64 {
        let mut rng = replicate_rng(s, 31);
        let n = rng.random_range(2..=64);
        let weights: Vec<f64> = (0..n * n).map(|_| if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random::<f64>() }).collect();
        let chain = MarkovChain::from_weights(n, weights);
        ensure(chain.row_sums().iter().all(|s| (s - 1.0).abs() < 1e-9), || "random chain not row-stochastic".into())?;
        let st = chain.stationary(1e-13, 20_000);
        ensure(st.residual < 1e-6, || format!("residual {}", st.residual))?;
        for (p, q) in st.pi.iter().zip(&dense_stationary(&chain)) {
            worst = worst.max((p - q).abs());
        }
    }
    ensure(worst <= 1e-8, || format!("power iteration off by {worst:e}"))?;

    // Every chain built for a real image.
    let cfg = GbvsConfig::default();
    let img = disk_image(96, 64, &[(30.0, 40.0, 8.0)], [240, 240, 240], [60, 60, 60]);
    let maps = gbvs::feature_channels(&img, &cfg);
    let falloff = gbvs::Falloff::new(maps[0].width, maps[0].height, maps[0].width as f64 * cfg.sigma_fraction);
    let mut max_residual = 0.0f64;
    for f in &maps {
        let a = gbvs::activation_map(f, &falloff, &cfg);
        let n = gbvs::normalize_activation(&a.map, &falloff, &cfg);
        for chain in [gbvs::dissimilarity_chain(&f.values, &falloff), gbvs::concentration_chain(&a.map.values, &falloff)] {
            ensure(chain.row_sums().iter().all(|s| (s - 1.0).abs() < 1e-9), || "image chain not row-stochastic".into())?;
        }
        max_residual = max_residual.max(a.residual).max(n.residual);
    }
    ensure(max_residual < 1e-6, || format!("image residual {max_residual:e}"))?;

    let out = gbvs::gbvs(&img, &cfg, Execution::Parallel);
    let (x, y) = out.raster.argmax();
    let (dx, dy) = (x as f64 + 0.5 - 30.0, y as f64 + 0.5 - 40.0);
    ensure(dx * dx + dy * dy <= 64.0, || format!("argmax ({x},{y}) outside the disk"))?;

    let mirror = disk_image(80, 48, &[(20.0, 24.0, 7.0), (60.0, 24.0, 7.0)], [250, 200, 40], [90, 90, 90]);
    let r = gbvs::gbvs_map(&mirror, &cfg);
    let mut asym = 0.0f64;
    for yy in 0..r.height {
        for xx in 0..r.width / 2 {
            asym = asym.max((r.get(xx, yy) - r.get(r.width - 1 - xx, yy)).abs());
        }
    }
    ensure(asym < 1e-4, || format!("mirror asymmetry {asym:e}"))?;
    Ok(format!("dense agreement {worst:.1e}, residual {max_residual:.1e}, mirror {asym:.1e}"))
}

// ---- planted pipeline ----

fn summary_for<'a>(rows: &'a [AlignmentSummary], agent: &str) -> Result<&'a AlignmentSummary, String> {
    rows.iter().find(|s| s.agent_id == agent).ok_or_else(|| format!("no alignment row for {agent}"))
}

pub fn planted_end_to_end(root: &Path) -> Check {
    let cfg = SynthConfig { n_scenes: 100, seed: 1, participants: 0, ..Default::default() };
    generate(&cfg, root).map_err(|e| e.to_string())?;
    let p = Pipeline::open(&root.join("run.json")).map_err(|e| e.to_string())?;
    for s in [Stage::Prepare, Stage::Describe, Stage::Score, Stage::Eval] {
        let o = p.run(s).map_err(|e| e.to_string())?;
        ensure(!o.is_partial(), || format!("{} left {} items out", s.name(), o.n_failed))?;
    }
    let rows: Vec<AlignmentSummary> = read_records(&p.output_dir().join("eval/alignment.csv")).map_err(|e| e.to_string())?;
    let s = summary_for(&rows, "mock-t00")?;
    let hits = (s.top1_accuracy * s.n_scenes as f64).round() as usize;
    let tau = s.tau_mean.ok_or("tau undefined")?;
    ensure(s.n_scenes == 100, || format!("{} scenes evaluated", s.n_scenes))?;
    ensure(hits >= 95 && tau >= 0.8, || format!("top-1 {hits}/100, tau {tau:.3}"))?;
    Ok(format!("top-1 {hits}/100, mean tau {tau:.3}"))
}

// ---- statistics ----

pub fn permutation_null_sanity(iterations: usize) -> Check {
    let n = 1306;
    let mut rng = replicate_rng(5, 0);
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let c = ResampleConfig { n_iterations: iterations, seed: 1, tail: Tail::Auto };
    let s = permutation_null(&x, &y, CorrKind::Spearman, &c, Execution::Parallel).map_err(|e| e.to_string())?;
    ensure(s.mean.abs() < 0.005 && (0.022..=0.033).contains(&s.std), || format!("mean {:.4}, std {:.4}", s.mean, s.std))?;
    Ok(format!("mean {:.5}, std {:.4} over {iterations} permutations", s.mean, s.std))
}

/// Settings: per simulation, model and human css for 300 items are drawn
/// from the same planted process with independent noise; 400 paired
/// bootstrap replicates; one-sided, tail fixed to `greater`.
pub fn bootstrap_calibration(n_sims: u64) -> Check {
    let rejections: usize = Execution::Parallel
        .map_range(n_sims as usize, |sim| {
            let (m, h) = null_pair(300, 0.4, 10_000 + sim as u64);
            let c = ResampleConfig { n_iterations: 400, seed: sim as u64, tail: Tail::Greater };
            let s = bootstrap_bias_gap(&m, &h, Attribute::Size, &c, Execution::Sequential).expect("defined");
            (s.p < 0.05) as usize
        })
        .into_iter()
        .sum();
    let rate = rejections as f64 / n_sims as f64;
    ensure((0.03..=0.07).contains(&rate), || format!("rejection rate {rate:.3}"))?;
    Ok(format!("rejection rate {rate:.3} over {n_sims} simulations (300 items, 400 replicates)"))
}

pub fn driving_factor_synthetic(iterations: usize) -> Check {
    let (agents, human) = driving_factor_population(19, 800, 21);
    let c = ResampleConfig { n_iterations: iterations, seed: 7, tail: Tail::Auto };
    let size = driving_factor(&agents, &human, Attribute::Size, &c, Execution::Parallel).map_err(|e| e.to_string())?;
    let center = driving_factor(&agents, &human, Attribute::Center, &c, Execution::Parallel).map_err(|e| e.to_string())?;
    ensure(size.null.observed <= -0.9 && size.null.p < 0.01, || format!("size corr {:.3}, p {:.4}", size.null.observed, size.null.p))?;
    ensure(center.null.p > 0.2, || format!("unplanted attribute p {:.3}", center.null.p))?;
    Ok(format!(
        "size corr {:.3} (p {:.4}); centeredness p {:.3}",
        size.null.observed, size.null.p, center.null.p
    ))
}

// ---- determinism ----

pub fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

pub fn full_run(root: &Path, n_scenes: usize, iterations: usize) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let cfg = SynthConfig { n_scenes, seed: 4, ..Default::default() };
    generate(&cfg, root).map_err(|e| e.to_string())?;
    let mut rc = RunConfig::load(&root.join("run.json")).map_err(|e| e.to_string())?;
    rc.stats.n_iterations = iterations;
    let p = Pipeline::new(rc, root).map_err(|e| e.to_string())?;
    p.run_all(&p.default_stages()).map_err(|e| e.to_string())?;
    Ok(tree(p.output_dir()))
}

pub fn determinism(a: &Path, b: &Path) -> Check {
    let (ta, tb) = (full_run(a, 12, 300)?, full_run(b, 12, 300)?);
    ensure(ta.keys().eq(tb.keys()), || "file sets differ".into())?;
    if let Some(k) = ta.keys().find(|k| ta[*k] != tb[*k]) {
        return Err(format!("{k} differs"));
    }
    Ok(format!("{} files byte-identical", ta.len()))
}

// ---- released data ----

/// `None` when no released dataset is configured.
pub fn data_replay() -> Option<Check> {
    let dir = std::env::var_os("CSS_RELEASED_DATA")?;
    Some(replay(Path::new(&dir)))
}

fn replay(dir: &Path) -> Check {
    let p = Pipeline::open(&dir.join("run.json")).map_err(|e| e.to_string())?;
    p.run_all(&p.default_stages()).map_err(|e| e.to_string())?;
    let out = p.output_dir();
    let text = std::fs::read_to_string(out.join("human-filter/summary.json")).map_err(|e| e.to_string())?;
    let f: FilterSummary = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let discarded = f.n_discarded as f64 / f.n_responses as f64;
    let rows: Vec<AlignmentSummary> = read_records(&out.join("eval/alignment.csv")).map_err(|e| e.to_string())?;
    let human = summary_for(&rows, "human-predictor")?;
    let tau = human.tau_mean.ok_or("human tau undefined")?;
    let table: Vec<Table1Row> = read_records(&out.join("report/table1.csv")).map_err(|e| e.to_string())?;
    let size = table.iter().find(|r| r.delta_r_type == "size").ok_or("no size row")?.corr;
    let detail = format!(
        "discarded {:.2}%, human top-1 {:.3}, tau {:.3}, size corr {:.3}",
        100.0 * discarded,
        human.top1_accuracy,
        tau,
        size
    );
    let ok = (0.020..=0.025).contains(&discarded)
        && (human.top1_accuracy - 0.73).abs() <= 0.02
        && (tau - 0.58).abs() <= 0.02
        && (size + 0.613).abs() <= 0.05;
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}
