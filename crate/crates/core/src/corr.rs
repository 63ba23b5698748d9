//! Correlation coefficients: Pearson, Spearman (mid-ranks), point-biserial
//! and Kendall's tau-b.
//!
//! Coefficients that are mathematically undefined for the input (constant
//! vector, single class) come back as [`Undefined`] rather than NaN.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("correlation undefined: {0}")]
pub struct Undefined(pub String);

pub type CorrResult = std::result::Result<f64, Undefined>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrKind {
    Pearson,
    Spearman,
    /// Pearson on a 0/1-encoded first argument.
    PointBiserial,
}

impl CorrKind {
    pub fn compute(self, x: &[f64], y: &[f64]) -> CorrResult {
        match self {
            CorrKind::Pearson => pearson(x, y),
            CorrKind::Spearman => spearman(x, y),
            CorrKind::PointBiserial => {
                let b: Vec<bool> = x.iter().map(|&v| v != 0.0).collect();
                point_biserial(&b, y)
            }
        }
    }
}

fn check_lengths(x: usize, y: usize, min: usize) -> Result<(), Undefined> {
    if x != y {
        return Err(Undefined(format!("length mismatch {x} vs {y}")));
    }
    if x < min {
        return Err(Undefined(format!("{x} items, need at least {min}")));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn pearson(x: &[f64], y: &[f64]) -> CorrResult {
    check_lengths(x.len(), y.len(), 2)?;
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Undefined("non-finite input".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Undefined("constant input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing the mean of their positions.
pub fn mid_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> CorrResult {
    check_lengths(x.len(), y.len(), 2)?;
    pearson(&mid_ranks(x), &mid_ranks(y))
}

/// `(ȳ₁ − ȳ₀) / s_y · sqrt(n₁n₀/n²)` with the population standard deviation.
pub fn point_biserial(b: &[bool], y: &[f64]) -> CorrResult {
    check_lengths(b.len(), y.len(), 3)?;
    let n1 = b.iter().filter(|&&v| v).count();
    let n0 = b.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Undefined("binary variable has a single class".into()));
    }
    let n = y.len() as f64;
    let my = mean(y);
    let sy = (y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n).sqrt();
    if sy == 0.0 {
        return Err(Undefined("constant input".into()));
    }
    let (mut s1, mut s0) = (0.0, 0.0);
    for (&bit, &v) in b.iter().zip(y) {
        if bit {
            s1 += v;
        } else {
            s0 += v;
        }
    }
    let (m1, m0) = (s1 / n1 as f64, s0 / n0 as f64);
    Ok(((m1 - m0) / sy * ((n1 * n0) as f64 / (n * n)).sqrt()).clamp(-1.0, 1.0))
}

/// Kendall's tau-b from pairwise concordance counts.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> CorrResult {
    check_lengths(x.len(), y.len(), 2)?;
    let n = x.len();
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i].total_cmp(&x[j]) as i64;
            let dy = y[i].total_cmp(&y[j]) as i64;
            if x[i] == x[j] {
                tie_x += 1;
            }
            if y[i] == y[j] {
                tie_y += 1;
            }
            if x[i] != x[j] && y[i] != y[j] {
                if dx == dy {
                    concordant += 1;
                } else {
                    discordant += 1;
                }
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = (((n0 - tie_x) * (n0 - tie_y)) as f64).sqrt();
    if denom == 0.0 {
        return Err(Undefined("all values tied".into()));
    }
    Ok(((concordant - discordant) as f64 / denom).clamp(-1.0, 1.0))
}
