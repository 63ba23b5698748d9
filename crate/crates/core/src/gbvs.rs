//! Graph-based visual saliency.
//!
//! Feature maps (intensity, red-green and blue-yellow opponency, four Gabor
//! orientations, each at two scales) are brought to a common coarse grid.
//! Each map is activated by the equilibrium distribution of a Markov chain
//! whose edge weights grow with feature dissimilarity and decay with grid
//! distance, then concentrated by a second chain whose weights follow the
//! activation. Channel means are summed into a master map, upsampled
//! bilinearly to the image and rescaled to [0, 1].

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gateway::Image;
use crate::mask::BitMask;
use crate::raster::{Normalization, SaliencyRaster};
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbvsConfig {
    /// Longest side of the activation grid, in nodes.
    pub grid_side: u32,
    pub n_scales: u32,
    /// Gaussian distance falloff as a fraction of the grid width.
    pub sigma_fraction: f64,
    pub gabor_wavelength: f64,
    pub gabor_sigma: f64,
    /// L1 change between power iterations at which the chain is settled.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for GbvsConfig {
    fn default() -> Self {
        Self {
            grid_side: 32,
            n_scales: 2,
            sigma_fraction: 0.125,
            gabor_wavelength: 4.0,
            gabor_sigma: 2.0,
            tolerance: 1e-10,
            max_iterations: 10_000,
        }
    }
}

impl GbvsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_side < 2 || self.n_scales == 0 || self.max_iterations == 0 {
            return Err(Error::Invalid("gbvs grid_side >= 2, n_scales >= 1, max_iterations >= 1".into()));
        }
        if !(self.sigma_fraction > 0.0 && self.gabor_wavelength > 0.0 && self.gabor_sigma > 0.0 && self.tolerance > 0.0) {
            return Err(Error::Invalid("gbvs sigma, wavelength and tolerance must be positive".into()));
        }
        Ok(())
    }

    /// Content hash recorded next to every attribute derived from GBVS.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&json)[..16].to_string()
    }
}

pub const ORIENTATIONS_DEG: [f64; 4] = [0.0, 45.0, 90.0, 135.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    Intensity,
    RedGreen,
    BlueYellow,
    /// Gabor energy; 0° responds to vertical edges.
    Orientation(u16),
}

impl Channel {
    /// Channels sharing a group are averaged before groups are summed.
    pub fn group(self) -> usize {
        match self {
            Channel::Intensity => 0,
            Channel::RedGreen | Channel::BlueYellow => 1,
            Channel::Orientation(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channel: Channel,
    pub scale: u32,
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.values[(y * self.width + x) as usize]
    }
}

/// Dimensions of a grid whose longest side is at most `side`.
pub fn grid_dims(width: u32, height: u32, side: u32) -> (u32, u32) {
    let longest = width.max(height);
    if longest <= side {
        return (width, height);
    }
    let f = side as f64 / longest as f64;
    (((width as f64 * f).round() as u32).max(1), ((height as f64 * f).round() as u32).max(1))
}

/// Box resampling where each output cell averages the source area it
/// covers, with fractional weights at cell borders. Mirror-symmetric.
pub fn resample_area(src: &[f64], sw: u32, sh: u32, dw: u32, dh: u32) -> Vec<f64> {
    fn weights(s: u32, d: u32) -> Vec<Vec<(usize, f64)>> {
        let scale = s as f64 / d as f64;
        (0..d)
            .map(|i| {
                let (a, b) = (i as f64 * scale, (i + 1) as f64 * scale);
                let mut w = Vec::new();
                let mut k = a.floor() as usize;
                while (k as f64) < b && k < s as usize {
                    let overlap = (b.min(k as f64 + 1.0) - a.max(k as f64)).max(0.0);
                    if overlap > 0.0 {
                        w.push((k, overlap / scale));
                    }
                    k += 1;
                }
                w
            })
            .collect()
    }
    if (sw, sh) == (dw, dh) {
        return src.to_vec();
    }
    let wx = weights(sw, dw);
    let wy = weights(sh, dh);
    let mut rows = vec![0.0; dw as usize * sh as usize];
    for y in 0..sh as usize {
        for (x, ws) in wx.iter().enumerate() {
            rows[y * dw as usize + x] = ws.iter().map(|&(k, w)| src[y * sw as usize + k] * w).sum();
        }
    }
    let mut out = vec![0.0; dw as usize * dh as usize];
    for (y, ws) in wy.iter().enumerate() {
        for x in 0..dw as usize {
            out[y * dw as usize + x] = ws.iter().map(|&(k, w)| rows[k * dw as usize + x] * w).sum();
        }
    }
    out
}

fn gabor_kernels(theta_deg: f64, wavelength: f64, sigma: f64) -> (usize, Vec<f64>, Vec<f64>) {
    let r = (3.0 * sigma).ceil() as i64;
    let size = (2 * r + 1) as usize;
    let theta = theta_deg.to_radians();
    let (mut even, mut odd) = (Vec::with_capacity(size * size), Vec::with_capacity(size * size));
    for y in -r..=r {
        for x in -r..=r {
            let (xf, yf) = (x as f64, y as f64);
            let along = xf * theta.cos() + yf * theta.sin();
            let env = (-(xf * xf + yf * yf) / (2.0 * sigma * sigma)).exp();
            even.push(env * (2.0 * PI * along / wavelength).cos());
            odd.push(env * (2.0 * PI * along / wavelength).sin());
        }
    }
    let m = even.iter().sum::<f64>() / even.len() as f64;
    for v in &mut even {
        *v -= m;
    }
    (size, even, odd)
}

/// Gabor energy with edge-replicated borders.
fn gabor_energy(src: &[f64], w: u32, h: u32, theta_deg: f64, cfg: &GbvsConfig) -> Vec<f64> {
    let (size, even, odd) = gabor_kernels(theta_deg, cfg.gabor_wavelength, cfg.gabor_sigma);
    let r = (size / 2) as i64;
    let (wi, hi) = (w as i64, h as i64);
    let mut out = vec![0.0; src.len()];
    for y in 0..hi {
        for x in 0..wi {
            let (mut e, mut o) = (0.0, 0.0);
            let mut k = 0;
            for dy in -r..=r {
                let sy = (y + dy).clamp(0, hi - 1);
                for dx in -r..=r {
                    let sx = (x + dx).clamp(0, wi - 1);
                    let v = src[(sy * wi + sx) as usize];
                    e += v * even[k];
                    o += v * odd[k];
                    k += 1;
                }
            }
            out[(y * wi + x) as usize] = (e * e + o * o).sqrt();
        }
    }
    out
}

/// Intensity, opponency and orientation maps at every scale, resampled to the
/// common activation grid.
pub fn feature_channels(image: &Image, cfg: &GbvsConfig) -> Vec<FeatureMap> {
    let (w, h) = image.dimensions();
    let (gw, gh) = grid_dims(w, h, cfg.grid_side);
    let n = (w * h) as usize;
    let (mut r, mut g, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for p in image.pixels() {
        r.push(p[0] as f64 / 255.0);
        g.push(p[1] as f64 / 255.0);
        b.push(p[2] as f64 / 255.0);
    }
    let mut maps = Vec::new();
    for scale in 0..cfg.n_scales {
        let side = cfg.grid_side << (cfg.n_scales - scale);
        let (sw, sh) = grid_dims(w, h, side);
        let rs = resample_area(&r, w, h, sw, sh);
        let gs = resample_area(&g, w, h, sw, sh);
        let bs = resample_area(&b, w, h, sw, sh);
        let intensity: Vec<f64> = (0..rs.len()).map(|i| (rs[i] + gs[i] + bs[i]) / 3.0).collect();
        let rg: Vec<f64> = (0..rs.len()).map(|i| rs[i] - gs[i]).collect();
        let by: Vec<f64> = (0..rs.len()).map(|i| bs[i] - (rs[i] + gs[i]) / 2.0).collect();
        let mut push = |channel, values: &[f64]| {
            maps.push(FeatureMap { channel, scale, width: gw, height: gh, values: resample_area(values, sw, sh, gw, gh) });
        };
        push(Channel::Intensity, &intensity);
        push(Channel::RedGreen, &rg);
        push(Channel::BlueYellow, &by);
        for theta in ORIENTATIONS_DEG {
            push(Channel::Orientation(theta as u16), &gabor_energy(&intensity, sw, sh, theta, cfg));
        }
    }
    maps
}

/// Dense row-stochastic transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    pub n: usize,
    pub transition: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stationary {
    pub pi: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `‖πP − π‖₁` of the returned vector.
    pub residual: f64,
}

impl MarkovChain {
    /// Normalizes each row of `weights` to sum to one; all-zero rows become uniform.
    pub fn from_weights(n: usize, mut weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), n * n);
        for row in weights.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                for v in row.iter_mut() {
                    *v /= s;
                }
            } else {
                row.fill(1.0 / n as f64);
            }
        }
        Self { n, transition: weights }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.transition.chunks(self.n).map(|r| r.iter().sum()).collect()
    }

    /// `πP`.
    pub fn step(&self, pi: &[f64]) -> Vec<f64> {
        let mut next = vec![0.0; self.n];
        for (i, row) in self.transition.chunks(self.n).enumerate() {
            let p = pi[i];
            if p == 0.0 {
                continue;
            }
            for (nx, t) in next.iter_mut().zip(row) {
                *nx += p * t;
            }
        }
        next
    }

    pub fn residual(&self, pi: &[f64]) -> f64 {
        self.step(pi).iter().zip(pi).map(|(a, b)| (a - b).abs()).sum()
    }

    /// Power iteration from the uniform vector until the L1 change falls
    /// below `tolerance` or `max_iterations` is reached.
    ///
    /// Iterates the lazy chain `(P + I) / 2`, which shares P's stationary
    /// distribution but cannot oscillate when P is periodic (a single outlier
    /// node makes the dissimilarity chain bipartite).
    pub fn stationary(&self, tolerance: f64, max_iterations: usize) -> Stationary {
        self.stationary_from(vec![1.0; self.n], tolerance, max_iterations)
    }

    /// Power iteration from `start` (normalized to sum to one; a start
    /// with no positive mass falls back to uniform).
    pub fn stationary_from(&self, start: Vec<f64>, tolerance: f64, max_iterations: usize) -> Stationary {
        assert_eq!(start.len(), self.n);
        let total: f64 = start.iter().sum();
        let mut pi = if total > 0.0 && start.iter().all(|v| *v >= 0.0 && v.is_finite()) {
            start.into_iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / self.n as f64; self.n]
        };
        for it in 1..=max_iterations {
            let mut next = self.step(&pi);
            for (v, p) in next.iter_mut().zip(&pi) {
                *v = 0.5 * (*v + p);
            }
            let s: f64 = next.iter().sum();
            for v in &mut next {
                *v /= s;
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < tolerance {
                let residual = self.residual(&pi);
                return Stationary { pi, iterations: it, converged: true, residual };
            }
        }
        let residual = self.residual(&pi);
        log::warn!("power iteration hit {max_iterations} iterations, residual {residual:e}");
        Stationary { pi, iterations: max_iterations, converged: false, residual }
    }
}

/// `exp(−d²/2σ²)` for every grid offset, indexed by `(|dx|, |dy|)`.
#[derive(Debug, Clone)]
pub struct Falloff {
    width: usize,
    height: usize,
    table: Vec<f64>,
}

impl Falloff {
    pub fn new(width: u32, height: u32, sigma: f64) -> Self {
        let (w, h) = (width as usize, height as usize);
        let denom = 2.0 * sigma * sigma;
        let mut table = vec![0.0; w * h];
        for dy in 0..h {
            for dx in 0..w {
                table[dy * w + dx] = (-((dx * dx + dy * dy) as f64) / denom).exp();
            }
        }
        Self { width: w, height: h, table }
    }

    #[inline]
    fn between(&self, i: usize, j: usize) -> f64 {
        let (xi, yi) = (i % self.width, i / self.width);
        let (xj, yj) = (j % self.width, j / self.width);
        self.table[yi.abs_diff(yj) * self.width + xi.abs_diff(xj)]
    }

    fn nodes(&self) -> usize {
        self.width * self.height
    }
}

/// Chain with `w(i→j) = |f(i) − f(j)| · exp(−d²/2σ²)`.
pub fn dissimilarity_chain(values: &[f64], falloff: &Falloff) -> MarkovChain {
    let n = values.len();
    assert_eq!(n, falloff.nodes());
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        let row = &mut weights[i * n..(i + 1) * n];
        for (j, w) in row.iter_mut().enumerate() {
            *w = (values[i] - values[j]).abs() * falloff.between(i, j);
        }
    }
    MarkovChain::from_weights(n, weights)
}

/// Chain with `w(i→j) = a(j) · exp(−d²/2σ²)`, moving mass toward high activation.
pub fn concentration_chain(activation: &[f64], falloff: &Falloff) -> MarkovChain {
    let n = activation.len();
    assert_eq!(n, falloff.nodes());
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        let row = &mut weights[i * n..(i + 1) * n];
        for (j, w) in row.iter_mut().enumerate() {
            *w = activation[j] * falloff.between(i, j);
        }
    }
    MarkovChain::from_weights(n, weights)
}

/// Detailed-balance solution of the dissimilarity chain: its weights are
/// symmetric, so the equilibrium is proportional to the row sums.
pub fn dissimilarity_equilibrium(values: &[f64], falloff: &Falloff) -> Vec<f64> {
    let n = values.len();
    (0..n).map(|i| (0..n).map(|j| (values[i] - values[j]).abs() * falloff.between(i, j)).sum()).collect()
}

/// Detailed-balance solution of the concentration chain,
/// `π(i) ∝ a(i) · Σⱼ a(j) · exp(−d²/2σ²)`.
pub fn concentration_equilibrium(activation: &[f64], falloff: &Falloff) -> Vec<f64> {
    let n = activation.len();
    (0..n)
        .map(|i| activation[i] * (0..n).map(|j| activation[j] * falloff.between(i, j)).sum::<f64>())
        .collect()
}

fn is_constant(values: &[f64]) -> bool {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo <= 1e-12 * (1.0 + hi.abs().max(lo.abs()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub map: FeatureMap,
    pub converged: bool,
    pub residual: f64,
}

fn uniform_like(f: &FeatureMap) -> FeatureMap {
    FeatureMap { values: vec![1.0 / f.values.len() as f64; f.values.len()], ..f.clone() }
}

/// Stationary distribution of the dissimilarity chain over `f`, reshaped to
/// the grid. Constant maps give the uniform distribution.
pub fn activation_map(f: &FeatureMap, falloff: &Falloff, cfg: &GbvsConfig) -> Activation {
    if is_constant(&f.values) {
        return Activation { map: uniform_like(f), converged: true, residual: 0.0 };
    }
    let chain = dissimilarity_chain(&f.values, falloff);
    let st = chain.stationary_from(dissimilarity_equilibrium(&f.values, falloff), cfg.tolerance, cfg.max_iterations);
    Activation { map: FeatureMap { values: st.pi, ..f.clone() }, converged: st.converged, residual: st.residual }
}

pub fn normalize_activation(a: &FeatureMap, falloff: &Falloff, cfg: &GbvsConfig) -> Activation {
    if is_constant(&a.values) {
        return Activation { map: uniform_like(a), converged: true, residual: 0.0 };
    }
    let chain = concentration_chain(&a.values, falloff);
    let st = chain.stationary_from(concentration_equilibrium(&a.values, falloff), cfg.tolerance, cfg.max_iterations);
    Activation { map: FeatureMap { values: st.pi, ..a.clone() }, converged: st.converged, residual: st.residual }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbvsOutput {
    pub raster: SaliencyRaster,
    /// Master map on the activation grid, before upsampling.
    pub grid: FeatureMap,
    pub all_converged: bool,
}

pub fn gbvs(image: &Image, cfg: &GbvsConfig, exec: Execution) -> GbvsOutput {
    let (w, h) = image.dimensions();
    let maps = feature_channels(image, cfg);
    let (gw, gh) = (maps[0].width, maps[0].height);
    let falloff = Falloff::new(gw, gh, gw as f64 * cfg.sigma_fraction);
    let normalized = exec.map_slice(&maps, |f| {
        let a = activation_map(f, &falloff, cfg);
        let n = normalize_activation(&a.map, &falloff, cfg);
        (n.map, a.converged && n.converged)
    });
    let mut master = vec![0.0; (gw * gh) as usize];
    let mut all_converged = true;
    for group in 0..3 {
        let members: Vec<&FeatureMap> = normalized.iter().filter(|(m, _)| m.channel.group() == group).map(|(m, _)| m).collect();
        for m in &members {
            for (acc, v) in master.iter_mut().zip(&m.values) {
                *acc += v / members.len() as f64;
            }
        }
    }
    for (_, c) in &normalized {
        all_converged &= c;
    }
    let grid = FeatureMap { channel: Channel::Intensity, scale: 0, width: gw, height: gh, values: master.clone() };
    let coarse = SaliencyRaster::from_values(gw, gh, master).expect("grid sized");
    let mut raster = coarse.resize_bilinear(w, h);
    if raster.max() > raster.min() {
        raster = raster.rescale_min_max();
    } else {
        raster.values.fill(0.0);
    }
    raster.normalization = Normalization::MinMax;
    GbvsOutput { raster, grid, all_converged }
}

pub fn gbvs_map(image: &Image, cfg: &GbvsConfig) -> SaliencyRaster {
    gbvs(image, cfg, Execution::default()).raster
}

/// Maximum raster value over the mask's on-pixels.
pub fn max_in_mask(raster: &SaliencyRaster, mask: &BitMask) -> Result<f64> {
    if raster.dims() != mask.dims() {
        return Err(Error::dims(raster.dims(), mask.dims()));
    }
    if mask.is_empty() {
        return Err(Error::Invalid(format!("max_in_mask: mask {:?} is empty", mask.label)));
    }
    Ok(mask.on_pixels().map(|(x, y)| raster.get(x, y)).fold(f64::NEG_INFINITY, f64::max))
}
