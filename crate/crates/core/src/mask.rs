//! Binary object masks and the four-step cleanup applied to raw segmenter
//! output before inpainting: duplicate removal, label-aware merging of nearby
//! masks, large-area rejection and dilation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BitMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
    pub label: String,
    pub confidence: f64,
}

impl BitMask {
    pub fn empty(width: u32, height: u32, label: impl Into<String>) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
            label: label.into(),
            confidence: 1.0,
        }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>, label: impl Into<String>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::Corrupt(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
            label: label.into(),
            confidence: 1.0,
        })
    }

    pub fn from_fn(width: u32, height: u32, label: impl Into<String>, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut m = Self::empty(width, height, label);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    /// Axis-aligned filled rectangle `[x0, x0+w) x [y0, y0+h)`, clipped to the raster.
    pub fn rect(width: u32, height: u32, label: impl Into<String>, x0: u32, y0: u32, w: u32, h: u32) -> Self {
        Self::from_fn(width, height, label, |x, y| {
            x >= x0 && x < x0.saturating_add(w) && y >= y0 && y < y0.saturating_add(h)
        })
    }

    pub fn with_confidence(mut self, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Invalid(format!("confidence {confidence} outside [0,1]")));
        }
        self.confidence = confidence;
        Ok(self)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, on: bool) {
        let w = self.width;
        self.bits[(y * w + x) as usize] = on;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Coordinates of all on-pixels in row-major order.
    pub fn on_pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i as u32 % w, i as u32 / w))
    }

    /// On-pixels with at least one 4-neighbour that is off or outside the raster.
    pub fn boundary_pixels(&self) -> Vec<(u32, u32)> {
        self.on_pixels()
            .filter(|&(x, y)| {
                x == 0
                    || y == 0
                    || x + 1 == self.width
                    || y + 1 == self.height
                    || !self.get(x - 1, y)
                    || !self.get(x + 1, y)
                    || !self.get(x, y - 1)
                    || !self.get(x, y + 1)
            })
            .collect()
    }

    /// Inclusive bounding box `(x_min, y_min, x_max, y_max)`; `None` when empty.
    pub fn bbox(&self) -> Option<(u32, u32, u32, u32)> {
        self.on_pixels().fold(None, |acc, (x, y)| match acc {
            None => Some((x, y, x, y)),
            Some((x0, y0, x1, y1)) => Some((x0.min(x), y0.min(y), x1.max(x), y1.max(y))),
        })
    }

    /// Unweighted mean of on-pixel coordinates.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (x, y) in self.on_pixels() {
            sx += x as f64;
            sy += y as f64;
            n += 1;
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    pub fn union(&self, other: &BitMask) -> Result<BitMask> {
        check_dims(self, other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        Ok(BitMask {
            width: self.width,
            height: self.height,
            bits,
            label: self.label.clone(),
            confidence: self.confidence.max(other.confidence),
        })
    }

    pub fn contains(&self, other: &BitMask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(a, b)| *a || !*b)
    }
}

fn check_dims(a: &BitMask, b: &BitMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dims(a.dims(), b.dims()));
    }
    Ok(())
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BitMask, b: &BitMask) -> Result<f64> {
    check_dims(a, b)?;
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&p, &q) in a.bits.iter().zip(&b.bits) {
        inter += (p && q) as usize;
        uni += (p || q) as usize;
    }
    Ok(if uni == 0 { 0.0 } else { inter as f64 / uni as f64 })
}

/// Minimum Euclidean distance between any on-pixel of `a` and any on-pixel of `b`.
///
/// Only boundary pixels are compared: for disjoint masks, every interior pixel
/// has a 4-neighbour in the same mask that is strictly closer to any outside
/// point, so the nearest pair always lies on the boundaries.
pub fn min_pixel_distance(a: &BitMask, b: &BitMask) -> Result<f64> {
    check_dims(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("distance to an empty mask".into()));
    }
    if a.bits.iter().zip(&b.bits).any(|(p, q)| *p && *q) {
        return Ok(0.0);
    }
    let ba = a.boundary_pixels();
    let bb = b.boundary_pixels();
    let mut best = u64::MAX;
    for &(ax, ay) in &ba {
        for &(bx, by) in &bb {
            let dx = ax.abs_diff(bx) as u64;
            let dy = ay.abs_diff(by) as u64;
            best = best.min(dx * dx + dy * dy);
        }
    }
    Ok((best as f64).sqrt())
}

/// Lower bound on the pixel distance from bounding boxes alone.
fn bbox_gap(a: (u32, u32, u32, u32), b: (u32, u32, u32, u32)) -> f64 {
    let gap = |lo1: u32, hi1: u32, lo2: u32, hi2: u32| -> f64 {
        if hi1 < lo2 {
            (lo2 - hi1) as f64
        } else if hi2 < lo1 {
            (lo1 - hi2) as f64
        } else {
            0.0
        }
    };
    let gx = gap(a.0, a.2, b.0, b.2);
    let gy = gap(a.1, a.3, b.1, b.3);
    (gx * gx + gy * gy).sqrt()
}

/// Morphological dilation with the disk `dx² + dy² ≤ radius²`.
pub fn dilate(m: &BitMask, radius: u32) -> BitMask {
    if radius == 0 {
        return m.clone();
    }
    let r = radius as i64;
    let offsets: Vec<(i64, i64)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect();
    let mut out = m.clone();
    let (w, h) = (m.width as i64, m.height as i64);
    for (x, y) in m.boundary_pixels() {
        for &(dx, dy) in &offsets {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx >= 0 && ny >= 0 && nx < w && ny < h {
                out.bits[(ny * w + nx) as usize] = true;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessParams {
    pub iou_dup_threshold: f64,
    pub merge_distance: f64,
    pub max_area_fraction: f64,
    pub dilation_radius: u32,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self {
            iou_dup_threshold: 0.95,
            merge_distance: 30.0,
            max_area_fraction: 0.30,
            dilation_radius: 5,
        }
    }
}

impl PreprocessParams {
    pub fn validate(&self) -> Result<()> {
        let ratio = |v: f64| (0.0..=1.0).contains(&v);
        if !ratio(self.iou_dup_threshold) || !ratio(self.max_area_fraction) {
            return Err(Error::Invalid("preprocess ratios must lie in [0,1]".into()));
        }
        if !(self.merge_distance >= 0.0) {
            return Err(Error::Invalid("merge_distance must be non-negative".into()));
        }
        Ok(())
    }
}

/// A mask surviving preprocessing plus the input indices it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedMask {
    pub mask: BitMask,
    pub sources: Vec<usize>,
}

fn normalized_label(label: &str) -> String {
    label.trim().to_lowercase()
}

/// Runs duplicate removal, label-aware merge, area filter and dilation, in
/// that order. Empty input masks are dropped up front.
pub fn preprocess(masks: &[BitMask], dims: (u32, u32), params: &PreprocessParams) -> Result<Vec<ProcessedMask>> {
    params.validate()?;
    for m in masks {
        if m.dims() != dims {
            return Err(Error::dims(dims, m.dims()));
        }
    }
    let candidates: Vec<usize> = (0..masks.len()).filter(|&i| !masks[i].is_empty()).collect();

    // 1. Duplicates: higher confidence wins, then lower index.
    let mut by_priority = candidates.clone();
    by_priority.sort_by(|&i, &j| masks[j].confidence.total_cmp(&masks[i].confidence).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in by_priority {
        let mut duplicate = false;
        for &k in &kept {
            if iou(&masks[i], &masks[k])? > params.iou_dup_threshold {
                duplicate = true;
                break;
            }
        }
        if !duplicate {
            kept.push(i);
        }
    }
    kept.sort_unstable();

    // 2. Merge same-label masks closer than merge_distance, transitively.
    let mut parent: Vec<usize> = (0..kept.len()).collect();
    fn find(parent: &mut [usize], i: usize) -> usize {
        let mut root = i;
        while parent[root] != root {
            root = parent[root];
        }
        let mut cur = i;
        while parent[cur] != root {
            let next = parent[cur];
            parent[cur] = root;
            cur = next;
        }
        root
    }
    let labels: Vec<String> = kept.iter().map(|&i| normalized_label(&masks[i].label)).collect();
    let boxes: Vec<_> = kept.iter().map(|&i| masks[i].bbox().expect("non-empty")).collect();
    for a in 0..kept.len() {
        for b in a + 1..kept.len() {
            if labels[a] != labels[b] || bbox_gap(boxes[a], boxes[b]) >= params.merge_distance {
                continue;
            }
            if min_pixel_distance(&masks[kept[a]], &masks[kept[b]])? < params.merge_distance {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut group_of_root = std::collections::BTreeMap::new();
    for a in 0..kept.len() {
        let root = find(&mut parent, a);
        let g = *group_of_root.entry(root).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(kept[a]);
    }
    let mut merged: Vec<ProcessedMask> = Vec::with_capacity(groups.len());
    for group in groups {
        let mut mask = masks[group[0]].clone();
        for &i in &group[1..] {
            mask = mask.union(&masks[i])?;
        }
        merged.push(ProcessedMask { mask, sources: group });
    }

    // 3. Area filter on post-merge area.
    let limit = params.max_area_fraction * dims.0 as f64 * dims.1 as f64;
    merged.retain(|p| p.mask.area() as f64 <= limit);

    // 4. Dilation.
    for p in &mut merged {
        p.mask = dilate(&p.mask, params.dilation_radius);
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_distance(a: &BitMask, b: &BitMask) -> f64 {
        let mut best = f64::INFINITY;
        for (ax, ay) in a.on_pixels() {
            for (bx, by) in b.on_pixels() {
                let d = ((ax as f64 - bx as f64).powi(2) + (ay as f64 - by as f64).powi(2)).sqrt();
                best = best.min(d);
            }
        }
        best
    }

    #[test]
    fn iou_basics() {
        let a = BitMask::rect(8, 8, "a", 0, 0, 2, 2);
        let b = BitMask::rect(8, 8, "b", 1, 0, 2, 2);
        let c = BitMask::rect(8, 8, "c", 5, 5, 2, 2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &c).unwrap(), 0.0);
        assert!((iou(&a, &b).unwrap() - 2.0 / 6.0).abs() < 1e-12);
        let e = BitMask::empty(8, 8, "e");
        assert_eq!(iou(&e, &e).unwrap(), 0.0);
        assert!(iou(&a, &BitMask::empty(4, 4, "x")).is_err());
    }

    #[test]
    fn distance_examples() {
        let a = BitMask::rect(10, 10, "a", 0, 0, 1, 1);
        let b = BitMask::rect(10, 10, "b", 3, 4, 1, 1);
        assert_eq!(min_pixel_distance(&a, &b).unwrap(), 5.0);
        let c = BitMask::rect(10, 10, "c", 0, 0, 3, 3);
        let d = BitMask::rect(10, 10, "d", 2, 2, 3, 3);
        assert_eq!(min_pixel_distance(&c, &d).unwrap(), 0.0);
        assert!(min_pixel_distance(&a, &BitMask::empty(10, 10, "e")).is_err());
    }

    #[test]
    fn dilate_single_pixel_radius_one_is_plus() {
        let m = BitMask::rect(5, 5, "p", 2, 2, 1, 1);
        let d = dilate(&m, 1);
        let expected = BitMask::from_fn(5, 5, "p", |x, y| {
            let (dx, dy) = (x as i64 - 2, y as i64 - 2);
            dx * dx + dy * dy <= 1
        });
        assert_eq!(d.bits(), expected.bits());
        assert_eq!(d.area(), 5);
        assert_eq!(dilate(&m, 0), m);
    }

    #[test]
    fn dilate_matches_disk_enumeration() {
        let m = BitMask::rect(40, 40, "r", 12, 15, 6, 3);
        for r in [1u32, 2, 4, 7] {
            let d = dilate(&m, r);
            let oracle = BitMask::from_fn(40, 40, "r", |x, y| {
                m.on_pixels().any(|(px, py)| {
                    let (dx, dy) = (x as i64 - px as i64, y as i64 - py as i64);
                    dx * dx + dy * dy <= (r * r) as i64
                })
            });
            assert_eq!(d.bits(), oracle.bits(), "radius {r}");
        }
    }

    #[test]
    fn identical_masks_with_different_labels_dedup() {
        let a = BitMask::rect(50, 50, "cup", 5, 5, 5, 5);
        let mut b = a.clone();
        b.label = "mug".into();
        let params = PreprocessParams { dilation_radius: 0, ..Default::default() };
        let out = preprocess(&[a.clone(), b], (50, 50), &params).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].sources, vec![0]);
    }

    #[test]
    fn dedup_prefers_confidence() {
        let a = BitMask::rect(50, 50, "cup", 5, 5, 5, 5).with_confidence(0.5).unwrap();
        let b = BitMask::rect(50, 50, "mug", 5, 5, 5, 5).with_confidence(0.9).unwrap();
        let params = PreprocessParams { dilation_radius: 0, ..Default::default() };
        let out = preprocess(&[a, b], (50, 50), &params).unwrap();
        assert_eq!(out[0].sources, vec![1]);
        assert_eq!(out[0].mask.label, "mug");
    }

    #[test]
    fn candles_merge_dog_untouched() {
        let dims = (200, 200);
        let c1 = BitMask::rect(200, 200, "candle", 20, 20, 5, 5);
        let c2 = BitMask::rect(200, 200, "candle", 35, 20, 5, 5);
        let dog = BitMask::rect(200, 200, "dog", 50, 20, 5, 5);
        let params = PreprocessParams { dilation_radius: 0, ..Default::default() };
        let out = preprocess(&[c1.clone(), c2.clone(), dog.clone()], dims, &params).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].sources, vec![0, 1]);
        assert_eq!(out[0].mask, c1.union(&c2).unwrap());
        assert_eq!(out[1].sources, vec![2]);
        assert_eq!(out[1].mask, dog);
    }

    #[test]
    fn large_mask_removed() {
        let big = BitMask::rect(100, 100, "table", 0, 0, 100, 40);
        let small = BitMask::rect(100, 100, "cup", 0, 60, 4, 4);
        let out = preprocess(&[big, small], (100, 100), &PreprocessParams::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].sources, vec![1]);
    }

    #[test]
    fn merged_cluster_over_area_limit_is_removed() {
        // Each half is 20% of the image; their union is 40%.
        let a = BitMask::rect(100, 100, "rock", 0, 0, 100, 20);
        let b = BitMask::rect(100, 100, "rock", 0, 25, 100, 20);
        let params = PreprocessParams { dilation_radius: 0, ..Default::default() };
        let out = preprocess(&[a, b], (100, 100), &params).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = BitMask::rect(10, 10, "a", 0, 0, 2, 2);
        assert!(matches!(
            preprocess(&[a], (20, 20), &PreprocessParams::default()),
            Err(Error::Dimensions { .. })
        ));
    }

    fn arb_mask(w: u32, h: u32) -> impl Strategy<Value = BitMask> {
        (0..w, 0..h, 1..w / 2, 1..h / 2, 0usize..3, 0.0f64..1.0).prop_map(move |(x, y, rw, rh, l, c)| {
            BitMask::rect(w, h, ["a", "b", "c"][l], x, y, rw, rh)
                .with_confidence(c)
                .unwrap()
        })
    }

    proptest! {
        #[test]
        fn distance_matches_brute_force(a in arb_mask(24, 24), b in arb_mask(24, 24)) {
            prop_assert_eq!(min_pixel_distance(&a, &b).unwrap(), brute_distance(&a, &b));
            prop_assert_eq!(min_pixel_distance(&a, &b).unwrap(), min_pixel_distance(&b, &a).unwrap());
        }

        #[test]
        fn iou_is_symmetric(a in arb_mask(16, 16), b in arb_mask(16, 16)) {
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        }

        #[test]
        fn dilation_is_monotone(m in arb_mask(24, 24), r in 0u32..4, s in 0u32..4) {
            let d = dilate(&m, r);
            prop_assert!(d.contains(&m));
            prop_assert!(dilate(&d, s).contains(&dilate(&m, r.max(s))));
        }

        #[test]
        fn preprocess_idempotent_without_dilation(masks in prop::collection::vec(arb_mask(60, 60), 1..6)) {
            let params = PreprocessParams { merge_distance: 8.0, dilation_radius: 0, ..Default::default() };
            let once: Vec<BitMask> = preprocess(&masks, (60, 60), &params).unwrap().into_iter().map(|p| p.mask).collect();
            let twice: Vec<BitMask> = preprocess(&once, (60, 60), &params).unwrap().into_iter().map(|p| p.mask).collect();
            let bits = |v: &[BitMask]| v.iter().map(|m| m.bits().to_vec()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&once), bits(&twice));
        }
    }
}
