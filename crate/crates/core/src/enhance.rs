//! Contrast enhancement: global histogram equalization and dark-channel
//! dehazing for single-channel images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{quantize_pixel, GrayImage, RealImage};

const LEVELS: usize = 256;

/// Cumulative histogram of an 8-bit image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistEqTable {
    pub cdf: [u64; LEVELS],
    /// Smallest non-zero cumulative count.
    pub cdf_min: u64,
    /// Pixel count (width × height).
    pub total: u64,
}

impl HistEqTable {
    pub fn of(img: &GrayImage) -> Self {
        let mut hist = [0u64; LEVELS];
        for &v in img.data() {
            hist[v as usize] += 1;
        }
        let mut cdf = [0u64; LEVELS];
        let mut acc = 0;
        for (slot, count) in cdf.iter_mut().zip(hist) {
            acc += count;
            *slot = acc;
        }
        let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
        Self { cdf, cdf_min, total: acc }
    }

    /// Output level for input level `v`; `None` for a single-level image.
    pub fn map(&self, v: u8) -> Option<u8> {
        let denom = self.total - self.cdf_min;
        if denom == 0 {
            return None;
        }
        let num = self.cdf[v as usize].saturating_sub(self.cdf_min);
        Some(quantize_pixel(num as f64 / denom as f64 * (LEVELS - 1) as f64))
    }
}

/// Global histogram equalization. A constant image is returned unchanged.
pub fn histogram_equalize(img: &GrayImage) -> GrayImage {
    let table = HistEqTable::of(img);
    let mut lut = [0u8; LEVELS];
    for (v, slot) in lut.iter_mut().enumerate() {
        match table.map(v as u8) {
            Some(out) => *slot = out,
            None => return img.clone(),
        }
    }
    img.map(|v| lut[v as usize])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DehazeParams {
    /// Half-width of the square dark-channel and refinement windows.
    pub patch_radius: usize,
    /// Fraction of haze removed, in (0, 1].
    pub omega: f64,
    /// Lower bound on transmission.
    pub t_floor: f64,
    /// Top fraction of dark-channel pixels averaged into the airlight.
    pub airlight_fraction: f64,
}

impl Default for DehazeParams {
    fn default() -> Self {
        Self { patch_radius: 7, omega: 0.95, t_floor: 0.1, airlight_fraction: 0.001 }
    }
}

impl DehazeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(Error::InvalidParameter(format!("omega {} not in (0, 1]", self.omega)));
        }
        if !(self.t_floor > 0.0 && self.t_floor < 1.0) {
            return Err(Error::InvalidParameter(format!("t_floor {} not in (0, 1)", self.t_floor)));
        }
        if !(self.airlight_fraction > 0.0 && self.airlight_fraction <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "airlight_fraction {} not in (0, 1]",
                self.airlight_fraction
            )));
        }
        Ok(())
    }
}

/// Separable square-window reduction with replicated borders.
fn window_filter(img: &RealImage, radius: usize, init: f64, fold: impl Fn(f64, f64) -> f64) -> RealImage {
    let (w, h) = (img.width, img.height);
    let r = radius as isize;
    let mut rows = RealImage::zeros(w, h);
    for y in 0..h {
        let line = &img.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = init;
            for dx in -r..=r {
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                acc = fold(acc, line[xx]);
            }
            rows.data[y * w + x] = acc;
        }
    }
    let mut out = RealImage::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = init;
            for dy in -r..=r {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                acc = fold(acc, rows.data[yy * w + x]);
            }
            out.data[y * w + x] = acc;
        }
    }
    out
}

/// Square minimum filter (the single-channel dark channel).
pub fn min_filter(img: &RealImage, radius: usize) -> RealImage {
    window_filter(img, radius, f64::INFINITY, f64::min)
}

/// Square mean filter.
pub fn box_filter(img: &RealImage, radius: usize) -> RealImage {
    let n = ((2 * radius + 1) * (2 * radius + 1)) as f64;
    let mut sum = window_filter(img, radius, 0.0, |a, b| a + b);
    sum.data.iter_mut().for_each(|v| *v /= n);
    sum
}

/// Intermediate quantities of one dehazing pass.
#[derive(Clone, Debug)]
pub struct DehazeTrace {
    pub dark: RealImage,
    pub airlight: f64,
    pub transmission: RealImage,
    pub output: GrayImage,
}

/// Mean intensity of the brightest `fraction` of pixels ranked by the dark
/// channel (ties broken by raster index). At least one pixel is used.
pub fn estimate_airlight(img: &RealImage, dark: &RealImage, fraction: f64) -> f64 {
    let n = img.data.len();
    let take = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dark.data[b].total_cmp(&dark.data[a]).then(a.cmp(&b)));
    order[..take].iter().map(|&i| img.data[i]).sum::<f64>() / take as f64
}

pub fn dehaze_traced(img: &GrayImage, p: &DehazeParams) -> DehazeTrace {
    let input = img.to_real();
    let dark = min_filter(&input, p.patch_radius);
    let airlight = estimate_airlight(&input, &dark, p.airlight_fraction);
    // a black image has no haze to remove; keep the division defined
    let a = airlight.max(1.0);
    let normalized = RealImage { width: input.width, height: input.height, data: input.data.iter().map(|v| v / a).collect() };
    let mut raw_t = min_filter(&normalized, p.patch_radius);
    raw_t.data.iter_mut().for_each(|d| *d = 1.0 - p.omega * *d);
    let transmission = box_filter(&raw_t, p.patch_radius);
    let restored: Vec<f64> = input
        .data
        .iter()
        .zip(&transmission.data)
        .map(|(&i, &t)| (i - a) / t.max(p.t_floor) + a)
        .collect();
    let output = RealImage { width: input.width, height: input.height, data: restored }.quantize();
    DehazeTrace { dark, airlight, transmission, output }
}

/// Dark-channel-prior dehazing with box-filtered transmission.
pub fn dehaze(img: &GrayImage, p: &DehazeParams) -> GrayImage {
    dehaze_traced(img, p).output
}
