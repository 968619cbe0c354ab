//! Seeded two-phase Chan-Vese segmentation.
//!
//! The level set is positive inside the contour. Each step updates the region
//! means with the arctan-smoothed Heaviside as weight, then takes an explicit
//! gradient step
//!
//! ```text
//! φ ← φ + dt · δε(φ) · [ μ κ(φ) − ν − λ1 (u0 − c1)² + λ2 (u0 − c2)² ]
//! ```
//!
//! where κ is the curvature of the level lines. Intensities stay on the
//! 0..255 scale, hence the `0.2 · 255²` default length weight.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{GrayImage, Mask, RealImage};

pub const DEFAULT_HALF_SIZE: usize = 10;

/// Square seed region centered on a pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSpec {
    pub center_row: usize,
    pub center_col: usize,
    pub half_size: usize,
}

impl SeedSpec {
    /// Inclusive row range.
    pub fn rows(&self) -> [usize; 2] {
        [self.center_row.saturating_sub(self.half_size), self.center_row + self.half_size]
    }

    /// Inclusive column range.
    pub fn cols(&self) -> [usize; 2] {
        [self.center_col.saturating_sub(self.half_size), self.center_col + self.half_size]
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (r, c) = (self.rows(), self.cols());
        (r[0]..=r[1]).contains(&row) && (c[0]..=c[1]).contains(&col)
    }

    pub fn check_inside(&self, width: usize, height: usize) -> Result<()> {
        let h = self.half_size;
        if self.center_row < h || self.center_col < h || self.center_row + h >= height || self.center_col + h >= width {
            return Err(Error::SeedOutOfBounds(format!(
                "seed rows {:?} cols {:?} in a {width}x{height} image",
                [self.center_row as isize - h as isize, (self.center_row + h) as isize],
                [self.center_col as isize - h as isize, (self.center_col + h) as isize],
            )));
        }
        Ok(())
    }
}

/// Seed of half-size 10 centered at `(height/2, width/2)`.
pub fn default_seed(width: usize, height: usize) -> Result<SeedSpec> {
    let seed = SeedSpec { center_row: height / 2, center_col: width / 2, half_size: DEFAULT_HALF_SIZE };
    seed.check_inside(width, height)?;
    Ok(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChanVeseParams {
    /// Contour length weight.
    pub mu: f64,
    /// Inside-area weight.
    pub nu: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Heaviside smoothing width.
    pub epsilon: f64,
    pub dt: f64,
    pub iterations: usize,
    /// Capture the mask every this many iterations; 0 disables snapshots.
    pub snapshot_every: usize,
}

impl Default for ChanVeseParams {
    fn default() -> Self {
        Self {
            mu: 0.2 * 255.0 * 255.0,
            nu: 0.0,
            lambda1: 1.0,
            lambda2: 1.0,
            epsilon: 1.0,
            dt: 0.5,
            iterations: 625,
            snapshot_every: 0,
        }
    }
}

impl ChanVeseParams {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("iterations must be at least 1".into()));
        }
        if !(self.dt > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter("dt and epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Signed field whose zero level is the contour; positive inside.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSet {
    pub phi: RealImage,
}

impl LevelSet {
    pub fn mask(&self) -> Mask {
        Mask::new(self.phi.width, self.phi.height, self.phi.data.iter().map(|&v| v >= 0.0).collect())
            .expect("level set dimensions are valid")
    }
}

/// `+1` inside the seed square, `−1` outside.
pub fn init_level_set(seed: &SeedSpec, width: usize, height: usize) -> Result<LevelSet> {
    seed.check_inside(width, height)?;
    let mut phi = RealImage::zeros(width, height);
    for r in 0..height {
        for c in 0..width {
            phi.data[r * width + c] = if seed.contains(r, c) { 1.0 } else { -1.0 };
        }
    }
    Ok(LevelSet { phi })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvState {
    pub level_set: LevelSet,
    /// Mean intensity inside.
    pub c1: f64,
    /// Mean intensity outside.
    pub c2: f64,
    pub energy: f64,
    pub iteration: usize,
}

impl CvState {
    pub fn new(level_set: LevelSet, img: &GrayImage) -> Self {
        let mean = img.data().iter().map(|&v| f64::from(v)).sum::<f64>() / img.data().len() as f64;
        Self { level_set, c1: mean, c2: mean, energy: f64::INFINITY, iteration: 0 }
    }
}

#[inline]
pub fn heaviside(phi: f64, eps: f64) -> f64 {
    0.5 * (1.0 + (2.0 / PI) * (phi / eps).atan())
}

#[inline]
pub fn dirac(phi: f64, eps: f64) -> f64 {
    eps / (PI * (eps * eps + phi * phi))
}

/// Means of the pixels on each side of the zero level, weighted by `Hε` and
/// `1 − Hε`; an empty side keeps its previous mean.
fn region_means(phi: &RealImage, img: &GrayImage, eps: f64, prev: (f64, f64)) -> (f64, f64) {
    let (mut s1, mut w1, mut s2, mut w2) = (0.0, 0.0, 0.0, 0.0);
    let (mut any_in, mut any_out) = (false, false);
    for (&p, &u) in phi.data.iter().zip(img.data()) {
        let h = heaviside(p, eps);
        let u = f64::from(u);
        if p >= 0.0 {
            s1 += u * h;
            w1 += h;
            any_in = true;
        } else {
            s2 += u * (1.0 - h);
            w2 += 1.0 - h;
            any_out = true;
        }
    }
    let c1 = if any_in && w1 > 0.0 { s1 / w1 } else { prev.0 };
    let c2 = if any_out && w2 > 0.0 { s2 / w2 } else { prev.1 };
    (c1, c2)
}

/// Regularizer added to `|∇φ|²` in the curvature denominator. Without it
/// nearly flat plateaus of φ produce unbounded curvature.
pub const CURVATURE_ETA: f64 = 1.0;

/// Curvature `div(∇φ/|∇φ|)` by central differences with replicated borders,
/// using `(|∇φ|² + η²)^{3/2}` as the denominator.
pub fn curvature(phi: &RealImage) -> RealImage {
    let (w, h) = (phi.width, phi.height);
    let at = |r: isize, c: isize| phi.data[r.clamp(0, h as isize - 1) as usize * w + c.clamp(0, w as isize - 1) as usize];
    let mut out = RealImage::zeros(w, h);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let p = at(r, c);
            let px = 0.5 * (at(r, c + 1) - at(r, c - 1));
            let py = 0.5 * (at(r + 1, c) - at(r - 1, c));
            let pxx = at(r, c + 1) - 2.0 * p + at(r, c - 1);
            let pyy = at(r + 1, c) - 2.0 * p + at(r - 1, c);
            let pxy = 0.25 * (at(r + 1, c + 1) - at(r + 1, c - 1) - at(r - 1, c + 1) + at(r - 1, c - 1));
            let g2 = px * px + py * py + CURVATURE_ETA * CURVATURE_ETA;
            out.data[r as usize * w + c as usize] = (pxx * py * py - 2.0 * px * py * pxy + pyy * px * px) / (g2 * g2.sqrt());
        }
    }
    out
}

/// Smoothed energy `μ Σ δε(φ)|∇φ| + ν Σ Hε(φ) + λ1 Σ (u0−c1)² Hε + λ2 Σ (u0−c2)² (1−Hε)`.
pub fn smoothed_energy(phi: &RealImage, img: &GrayImage, c1: f64, c2: f64, p: &ChanVeseParams) -> f64 {
    let (w, h) = (phi.width, phi.height);
    let mut e = 0.0;
    for r in 0..h {
        for c in 0..w {
            let v = phi.data[r * w + c];
            let gx = phi.data[r * w + (c + 1).min(w - 1)] - v;
            let gy = phi.data[(r + 1).min(h - 1) * w + c] - v;
            let hv = heaviside(v, p.epsilon);
            let u = f64::from(img.get(r, c));
            e += p.mu * dirac(v, p.epsilon) * (gx * gx + gy * gy).sqrt()
                + p.nu * hv
                + p.lambda1 * (u - c1).powi(2) * hv
                + p.lambda2 * (u - c2).powi(2) * (1.0 - hv);
        }
    }
    e
}

/// Energy of a hard partition: the contour length is the number of 4-neighbor
/// pixel edges separating inside from outside; the region constants are the
/// exact region means.
pub fn mask_energy(img: &GrayImage, mask: &Mask, p: &ChanVeseParams) -> Result<f64> {
    if img.dims() != mask.dims() {
        return Err(Error::DimensionMismatch("image and mask differ in size".into()));
    }
    let (w, h) = img.dims();
    let mut length = 0usize;
    for r in 0..h {
        for c in 0..w {
            if c + 1 < w && mask.get(r, c) != mask.get(r, c + 1) {
                length += 1;
            }
            if r + 1 < h && mask.get(r, c) != mask.get(r + 1, c) {
                length += 1;
            }
        }
    }
    let mean = |inside: bool| {
        let (s, n) = img
            .data()
            .iter()
            .zip(mask.data())
            .filter(|(_, &m)| m == inside)
            .fold((0.0, 0usize), |(s, n), (&u, _)| (s + f64::from(u), n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    let (c1, c2) = (mean(true), mean(false));
    let fit: f64 = img
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&u, &m)| {
            let u = f64::from(u);
            if m {
                p.lambda1 * (u - c1).powi(2)
            } else {
                p.lambda2 * (u - c2).powi(2)
            }
        })
        .sum();
    Ok(p.mu * length as f64 + p.nu * mask.count() as f64 + fit)
}

/// One explicit Chan-Vese iteration.
/// Forces are applied in normalized intensity units so `phi` stays near the
/// unit scale of its initialization.
const FORCE_SCALE: f64 = 1.0 / (255.0 * 255.0);

pub fn cv_step(state: &CvState, img: &GrayImage, p: &ChanVeseParams) -> Result<CvState> {
    let phi = &state.level_set.phi;
    if (phi.width, phi.height) != img.dims() {
        return Err(Error::DimensionMismatch("level set and image differ in size".into()));
    }
    let (c1, c2) = region_means(phi, img, p.epsilon, (state.c1, state.c2));
    let kappa = curvature(phi);
    let mut next = phi.clone();
    for (k, v) in next.data.iter_mut().enumerate() {
        let u = f64::from(img.data()[k]);
        let force = p.mu * kappa.data[k] - p.nu - p.lambda1 * (u - c1).powi(2) + p.lambda2 * (u - c2).powi(2);
        *v += p.dt * dirac(*v, p.epsilon) * force * FORCE_SCALE;
    }
    let energy = smoothed_energy(&next, img, c1, c2, p);
    Ok(CvState { level_set: LevelSet { phi: next }, c1, c2, energy, iteration: state.iteration + 1 })
}

#[derive(Clone, Debug)]
pub struct Segmentation {
    pub mask: Mask,
    pub snapshots: Vec<Mask>,
    pub state: CvState,
}

/// Runs the configured number of iterations from the seed.
pub fn run(img: &GrayImage, seed: &SeedSpec, p: &ChanVeseParams) -> Result<Segmentation> {
    run_observed(img, seed, p, |_, _| {})
}

/// [`run`] with a callback receiving `(completed, total)` after every step.
pub fn run_observed(
    img: &GrayImage,
    seed: &SeedSpec,
    p: &ChanVeseParams,
    mut progress: impl FnMut(usize, usize),
) -> Result<Segmentation> {
    p.validate()?;
    let (w, h) = img.dims();
    let ls = init_level_set(seed, w, h)?;
    let mut state = CvState::new(ls, img);
    let mut snapshots = Vec::new();
    for _ in 0..p.iterations {
        state = cv_step(&state, img, p)?;
        if p.snapshot_every > 0 && state.iteration % p.snapshot_every == 0 {
            snapshots.push(state.level_set.mask());
        }
        progress(state.iteration, p.iterations);
    }
    Ok(Segmentation { mask: state.level_set.mask(), snapshots, state })
}

/// `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &Mask, b: &Mask) -> f64 {
    assert_eq!(a.dims(), b.dims(), "dice needs equal dimensions");
    let inter = a.data().iter().zip(b.data()).filter(|(&x, &y)| x && y).count();
    let total = a.count() + b.count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}
