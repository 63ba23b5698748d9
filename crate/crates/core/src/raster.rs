//! Dense float rasters shared by the counterfactual, GBVS and white-box
//! saliency maps.

use std::path::Path;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[default]
    PerScene,
    Global,
    /// Min-max rescaled to [0, 1].
    MinMax,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyRaster {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
    pub normalization: Normalization,
}

impl SaliencyRaster {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width as usize * height as usize],
            normalization: Normalization::None,
        }
    }

    pub fn from_values(width: u32, height: u32, values: Vec<f64>) -> Result<Self> {
        if values.len() != width as usize * height as usize {
            return Err(Error::Corrupt(format!("{} values for a {width}x{height} raster", values.len())));
        }
        Ok(Self { width, height, values, normalization: Normalization::None })
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.values[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: f64) {
        let w = self.width;
        self.values[(y * w + x) as usize] = v;
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Index of the first maximal pixel as `(x, y)`.
    pub fn argmax(&self) -> (u32, u32) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best as u32 % self.width, best as u32 / self.width)
    }

    /// Rescales to [0, 1]; constant rasters are left unchanged.
    pub fn rescale_min_max(mut self) -> Self {
        let (lo, hi) = (self.min(), self.max());
        if hi > lo {
            for v in &mut self.values {
                *v = (*v - lo) / (hi - lo);
            }
            self.normalization = Normalization::MinMax;
        }
        self
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize_bilinear(&self, width: u32, height: u32) -> SaliencyRaster {
        if (width, height) == self.dims() {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = SaliencyRaster::zeros(width, height);
        out.normalization = self.normalization;
        let clamp = |v: f64, hi: u32| v.clamp(0.0, (hi - 1) as f64);
        for y in 0..height {
            let fy = clamp((y as f64 + 0.5) * sy - 0.5, self.height);
            let y0 = fy.floor() as u32;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = clamp((x as f64 + 0.5) * sx - 0.5, self.width);
                let x0 = fx.floor() as u32;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                let top = self.get(x0, y0) * (1.0 - tx) + self.get(x1, y0) * tx;
                let bottom = self.get(x0, y1) * (1.0 - tx) + self.get(x1, y1) * tx;
                out.set(x, y, top * (1.0 - ty) + bottom * ty);
            }
        }
        out
    }

    /// 8-bit grayscale rendering of values clamped to [0, 1].
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([(self.get(x, y).clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_gray().write_to(&mut buf, image::ImageFormat::Png)?;
        crate::store::records::write_atomic(path, &buf.into_inner())
    }
}
