//! Synthetic MRCP-like biliary phantoms with known tree and duct masks.
//!
//! A phantom is a vertical common duct through the image center, joined at
//! its upper end by angled hepatic branches, plus a few short intrahepatic
//! segments that are not connected to it. Every structure is a capsule (all
//! points within a radius of a line segment). Duct and branch lengths grow
//! with the duct width, so a dilated tree is longer, wider and more
//! ramified than a normal one.
//!
//! Rendering: clean two-level image, then a smooth multiplicative haze field
//! `I = J·(1 − h·g(x))`, then additive Gaussian noise. In the complemented
//! image the haze field takes the dark-channel form `J'·t + 255·(1 − t)`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::Label;
use crate::error::{Error, Result};
use crate::raster::{load_pgm, save_pgm, GrayImage, Mask, RealImage, WORK_SIDE};

/// 8 mm over an assumed 240 mm field of view sampled at 512 px.
pub const DEFAULT_DILATION_THRESHOLD_PX: f64 = 8.0 * 512.0 / 240.0;

const DUCT_LENGTH_BASE: f64 = 0.25;
const DUCT_LENGTH_PER_WIDTH: f64 = 1.0;
const DUCT_ABOVE_SEED: f64 = 0.3;
const BRANCH_LENGTH_BASE: f64 = 0.03;
const BRANCH_LENGTH_PER_WIDTH: f64 = 4.0;
const SEGMENT_ROW: f64 = 0.6;
const SEGMENT_LENGTH: f64 = 0.08;
const STONE_RADIUS: f64 = 0.15;
const STONE_LEVEL: f64 = 0.15;
const SEGMENT_COLS: [f64; 6] = [0.22, 0.78, 0.12, 0.88, 0.32, 0.68];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: usize,
    pub duct_width_px: f64,
    pub branch_count: usize,
    pub branch_width_px: f64,
    pub fg_intensity: u8,
    pub bg_intensity: u8,
    pub noise_sigma: f64,
    pub haze_strength: f64,
    /// Ducts wider than this are labeled dilated.
    pub dilation_threshold_px: f64,
    pub intrahepatic_segments: usize,
    /// Fraction of the tree contrast lost as the duct width approaches zero;
    /// ducts at or above the dilation threshold keep full contrast.
    pub partial_volume: f64,
    /// Fraction of the tree contrast that follows the chord length through
    /// each tube, so wide ducts are brightest along their axis. Zero renders
    /// a flat two-level tree.
    pub tube_profile: f64,
    /// Dark filling defects (stones) placed in the distal duct of dilated
    /// phantoms.
    pub stones: usize,
    pub rng_seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: WORK_SIDE,
            duct_width_px: 10.0,
            branch_count: 2,
            branch_width_px: 5.0,
            fg_intensity: 200,
            bg_intensity: 0,
            noise_sigma: 10.0,
            haze_strength: 0.3,
            dilation_threshold_px: DEFAULT_DILATION_THRESHOLD_PX,
            intrahepatic_segments: 3,
            partial_volume: 0.4,
            tube_profile: 1.0,
            stones: 12,
            rng_seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.duct_width_px >= 2.0) {
            return bad(format!("duct width {} must be at least 2 px", self.duct_width_px));
        }
        if self.fg_intensity <= self.bg_intensity {
            return bad("foreground intensity must exceed background".into());
        }
        if !(0.0..1.0).contains(&self.haze_strength) {
            return bad(format!("haze strength {} outside [0, 1)", self.haze_strength));
        }
        if !(self.noise_sigma >= 0.0) || !(self.branch_width_px > 0.0) || !(self.dilation_threshold_px > 0.0) {
            return bad("noise, branch width and threshold must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.partial_volume) {
            return bad(format!("partial volume {} outside [0, 1]", self.partial_volume));
        }
        if !(0.0..=1.0).contains(&self.tube_profile) {
            return bad(format!("tube profile {} outside [0, 1]", self.tube_profile));
        }
        if self.intrahepatic_segments > SEGMENT_COLS.len() {
            return bad(format!("at most {} intrahepatic segments", SEGMENT_COLS.len()));
        }
        if self.size < 32 {
            return bad(format!("size {} below 32 px", self.size));
        }
        Ok(())
    }

    pub fn label(&self) -> Label {
        if self.duct_width_px > self.dilation_threshold_px {
            Label::Dilated
        } else {
            Label::Normal
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub image: GrayImage,
    pub tree_mask: Mask,
    /// The common duct alone.
    pub duct_mask: Mask,
    pub label: Label,
    pub duct_width_px: f64,
}

/// All points within `radius` of the segment `a`–`b`, in `(row, col)` units.
#[derive(Clone, Copy, Debug)]
struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
}

impl Capsule {
    fn axis_distance2(&self, r: f64, c: f64) -> f64 {
        let (dr, dc) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dr * dr + dc * dc;
        let t = if len2 == 0.0 { 0.0 } else { (((r - self.a.0) * dr + (c - self.a.1) * dc) / len2).clamp(0.0, 1.0) };
        let (pr, pc) = (self.a.0 + t * dr, self.a.1 + t * dc);
        (r - pr).powi(2) + (c - pc).powi(2)
    }

    fn contains(&self, r: f64, c: f64) -> bool {
        self.axis_distance2(r, c) <= self.radius * self.radius
    }

    /// Chord length through the tube at `(r, c)` relative to its diameter.
    fn chord(&self, r: f64, c: f64) -> f64 {
        (1.0 - self.axis_distance2(r, c) / (self.radius * self.radius)).max(0.0).sqrt()
    }

    fn inside(&self, size: usize) -> bool {
        let s = size as f64;
        [self.a, self.b].iter().all(|&(r, c)| r - self.radius >= 0.0 && c - self.radius >= 0.0 && r + self.radius < s && c + self.radius < s)
    }

    fn rasterize(&self, size: usize) -> Mask {
        // sample at pixel centers
        Mask::from_fn(size, size, |r, c| self.contains(r as f64 + 0.5, c as f64 + 0.5))
    }
}

fn union(masks: &[Mask], size: usize) -> Mask {
    Mask::from_fn(size, size, |r, c| masks.iter().any(|m| m.get(r, c)))
}

pub fn generate(spec: &PhantomSpec) -> Result<PhantomSample> {
    spec.validate()?;
    let s = spec.size as f64;
    let w = spec.duct_width_px;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    let center = (s / 2.0, s / 2.0);
    let col = center.1 + rng.random_range(-0.5..=0.5);
    let length = DUCT_LENGTH_BASE * s + DUCT_LENGTH_PER_WIDTH * w;
    let top = center.0 - DUCT_ABOVE_SEED * length;
    let duct = Capsule { a: (top, col), b: (top + length, col), radius: w / 2.0 };

    let branch_len = BRANCH_LENGTH_BASE * s + BRANCH_LENGTH_PER_WIDTH * w;
    let branches: Vec<Capsule> = (0..spec.branch_count)
        .map(|k| {
            let spread = if spec.branch_count == 1 { 0.5 } else { k as f64 / (spec.branch_count - 1) as f64 };
            let angle = (145.0 - 110.0 * spread + rng.random_range(-3.0..=3.0)) * PI / 180.0;
            let end = (top - branch_len * angle.sin(), col + branch_len * angle.cos());
            Capsule { a: (top, col), b: end, radius: spec.branch_width_px / 2.0 }
        })
        .collect();

    let segments: Vec<Capsule> = SEGMENT_COLS[..spec.intrahepatic_segments]
        .iter()
        .map(|&fc| {
            let r = SEGMENT_ROW * s + rng.random_range(-0.02..=0.02) * s;
            let c = fc * s + rng.random_range(-0.02..=0.02) * s;
            let tilt: f64 = rng.random_range(-0.5..=0.5);
            let half = SEGMENT_LENGTH * s / 2.0;
            Capsule { a: (r - half * tilt.cos(), c - half * tilt.sin()), b: (r + half * tilt.cos(), c + half * tilt.sin()), radius: spec.branch_width_px / 2.0 }
        })
        .collect();

    let all: Vec<&Capsule> = std::iter::once(&duct).chain(&branches).chain(&segments).collect();
    if let Some(c) = all.iter().find(|c| !c.inside(spec.size)) {
        return Err(Error::InvalidParameter(format!("phantom structure {:?}–{:?} leaves the {}px image", c.a, c.b, spec.size)));
    }

    // stones sit below the seed window, spaced along the duct axis
    let stones: Vec<(f64, f64, f64)> = if spec.label().is_dilated() {
        let radius = STONE_RADIUS * w;
        let first = center.0 + crate::segment::DEFAULT_HALF_SIZE as f64 + radius + 2.0;
        let last = top + length - radius - 2.0;
        (0..spec.stones)
            .map(|k| {
                let t = (k as f64 + rng.random_range(0.3..=0.7)) / spec.stones as f64;
                (first + t * (last - first).max(0.0), col + rng.random_range(-0.25..=0.25) * w, radius)
            })
            .collect()
    } else {
        Vec::new()
    };

    let duct_mask = duct.rasterize(spec.size);
    let tree_mask = union(&all.iter().map(|c| c.rasterize(spec.size)).collect::<Vec<_>>(), spec.size);

    let contrast = 1.0 - spec.partial_volume * (1.0 - w / spec.dilation_threshold_px).max(0.0);
    let (bg, fg) = (f64::from(spec.bg_intensity), f64::from(spec.fg_intensity));
    let tree_level = bg + (fg - bg) * contrast;

    let theta: f64 = rng.random_range(0.0..PI);
    let freq: f64 = rng.random_range(0.5..1.0);
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let haze = |r: usize, c: usize| {
        let u = (r as f64 * theta.sin() + c as f64 * theta.cos()) / s;
        1.0 - spec.haze_strength * (0.5 + 0.5 * (2.0 * PI * freq * u + phase).sin())
    };

    let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let n = spec.size;
    let mut data = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let clean = if tree_mask.get(r, c) {
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                let chord = all.iter().map(|t| t.chord(y, x)).fold(0.0, f64::max);
                let lumen = if stones.iter().any(|&(sr, sc, rad)| (y - sr).powi(2) + (x - sc).powi(2) <= rad * rad) { STONE_LEVEL } else { 1.0 };
                bg + (tree_level - bg) * lumen * (1.0 - spec.tube_profile * (1.0 - chord))
            } else {
                bg
            };
            let noise = if spec.noise_sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            data.push(clean * haze(r, c) + noise);
        }
    }
    let image = RealImage::new(n, n, data)?.quantize();
    Ok(PhantomSample { image, tree_mask, duct_mask, label: spec.label(), duct_width_px: w })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_per_class: usize,
    pub base: PhantomSpec,
    /// Inclusive duct width ranges in pixels.
    pub normal_widths: (f64, f64),
    pub dilated_widths: (f64, f64),
    pub rng_seed: u64,
}

impl CorpusSpec {
    pub fn new(n_per_class: usize, base: PhantomSpec, rng_seed: u64) -> Self {
        Self { n_per_class, base, normal_widths: (6.0, 12.0), dilated_widths: (20.0, 34.0), rng_seed }
    }
}

/// One corpus entry with its identifier.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSample {
    pub id: String,
    pub sample: PhantomSample,
}

pub fn generate_corpus(n_per_class: usize, base: &PhantomSpec, rng_seed: u64) -> Result<Vec<CorpusSample>> {
    generate_corpus_with(&CorpusSpec::new(n_per_class, *base, rng_seed))
}

/// Balanced, shuffled corpus with widths drawn uniformly from the two ranges.
pub fn generate_corpus_with(c: &CorpusSpec) -> Result<Vec<CorpusSample>> {
    if c.n_per_class == 0 {
        return Err(Error::InvalidParameter("corpus needs at least one sample per class".into()));
    }
    let t = c.base.dilation_threshold_px;
    let (nl, nh) = c.normal_widths;
    let (dl, dh) = c.dilated_widths;
    if !(nl <= nh && nh <= t && t < dl && dl <= dh) {
        return Err(Error::InvalidParameter(format!(
            "width ranges [{nl}, {nh}] and [{dl}, {dh}] must sit on either side of the {t:.2}px threshold"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.rng_seed);
    let mut specs: Vec<PhantomSpec> = Vec::with_capacity(2 * c.n_per_class);
    for (lo, hi) in [(nl, nh), (dl, dh)] {
        for _ in 0..c.n_per_class {
            let w = if lo == hi { lo } else { rng.random_range(lo..=hi) };
            specs.push(PhantomSpec { duct_width_px: w, rng_seed: rng.random(), ..c.base });
        }
    }
    specs.shuffle(&mut rng);
    specs
        .par_iter()
        .enumerate()
        .map(|(i, s)| Ok(CorpusSample { id: format!("p{i:03}"), sample: generate(s)? }))
        .collect()
}

/// One manifest line; paths are stored relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub label: Label,
    pub duct_width_px: f64,
    pub image_path: PathBuf,
    pub tree_mask_path: PathBuf,
    pub duct_mask_path: PathBuf,
}

pub const MANIFEST_HEADER: &str = "id,label,duct_width_px,image_path,tree_mask_path,duct_mask_path";

/// Writes `<id>.pgm`, `<id>_tree.pgm`, `<id>_duct.pgm` and `manifest.csv`
/// into `dir`; returns the manifest path.
pub fn write_corpus(dir: &Path, corpus: &[CorpusSample]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for c in corpus {
        let files = [format!("{}.pgm", c.id), format!("{}_tree.pgm", c.id), format!("{}_duct.pgm", c.id)];
        fs::write(dir.join(&files[0]), save_pgm(&c.sample.image))?;
        fs::write(dir.join(&files[1]), save_pgm(&c.sample.tree_mask.to_gray()))?;
        fs::write(dir.join(&files[2]), save_pgm(&c.sample.duct_mask.to_gray()))?;
        manifest.push_str(&format!("{},{},{},{},{},{}\n", c.id, c.sample.label, c.sample.duct_width_px, files[0], files[1], files[2]));
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest)?;
    Ok(path)
}

/// Parses a manifest, resolving relative paths against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse { token: path.display().to_string(), reason: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    if header.join(",") != MANIFEST_HEADER {
        return Err(Error::Parse { token: header.join(","), reason: "unexpected manifest header".into() });
    }
    let resolve = |p: &str| {
        let p = Path::new(p);
        if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
    };
    reader
        .records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::Parse { token: "manifest".into(), reason: e.to_string() })?;
            Ok(ManifestEntry {
                id: rec[0].to_string(),
                label: Label::parse(&rec[1])?,
                duct_width_px: rec[2].parse().map_err(|_| Error::Parse { token: rec[2].to_string(), reason: "duct width".into() })?,
                image_path: resolve(&rec[3]),
                tree_mask_path: resolve(&rec[4]),
                duct_mask_path: resolve(&rec[5]),
            })
        })
        .collect()
}

/// Loads the sample images back from a manifest entry.
pub fn load_entry(e: &ManifestEntry) -> Result<PhantomSample> {
    let image = load_pgm(&fs::read(&e.image_path)?)?;
    let tree_mask = Mask::from_gray(&load_pgm(&fs::read(&e.tree_mask_path)?)?);
    let duct_mask = Mask::from_gray(&load_pgm(&fs::read(&e.duct_mask_path)?)?);
    Ok(PhantomSample { image, tree_mask, duct_mask, label: e.label, duct_width_px: e.duct_width_px })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{bile_duct_of, connected_components};
    use crate::segment::{default_seed, dice, run, ChanVeseParams};
    use std::collections::BTreeSet;

    fn clean(w: f64) -> PhantomSpec {
        PhantomSpec { size: 256, duct_width_px: w, noise_sigma: 0.0, haze_strength: 0.0, tube_profile: 0.0, stones: 0, ..Default::default() }
    }

    #[test]
    fn clean_render_is_two_level() {
        let p = generate(&clean(10.0)).unwrap();
        let values: BTreeSet<u8> = p.image.data().iter().copied().collect();
        assert_eq!(values.len(), 2);
        let fg = *values.iter().max().unwrap();
        assert_eq!(Mask::from_fn(256, 256, |r, c| p.image.get(r, c) == fg), p.tree_mask);
        assert!(p.duct_mask.is_subset_of(&p.tree_mask));
    }

    #[test]
    fn threshold_labels() {
        assert_eq!(generate(&PhantomSpec { duct_width_px: 30.0, ..clean(0.0) }).unwrap().label, Label::Dilated);
        assert_eq!(generate(&clean(10.0)).unwrap().label, Label::Normal);
        assert!((DEFAULT_DILATION_THRESHOLD_PX - 17.0667).abs() < 1e-4);
    }

    #[test]
    fn deterministic_per_seed() {
        let s = PhantomSpec { size: 128, rng_seed: 5, ..Default::default() };
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        assert_ne!(generate(&s).unwrap().image, generate(&PhantomSpec { rng_seed: 6, ..s }).unwrap().image);
    }

    #[test]
    fn duct_area_grows_with_width() {
        let mut last = 0;
        for w in [4.0, 6.0, 9.0, 14.0, 20.0, 27.0, 34.0] {
            let a = generate(&clean(w)).unwrap().duct_mask.count();
            assert!(a > last, "width {w}: {a} <= {last}");
            last = a;
        }
    }

    #[test]
    fn tree_shape_and_seed_overlap() {
        for w in [6.0, 12.0, 20.0, 34.0] {
            let p = generate(&clean(w)).unwrap();
            let blobs = connected_components(&p.tree_mask);
            assert_eq!(blobs.len(), 1 + 3, "duct with branches plus three segments");
            let duct = bile_duct_of(&blobs).unwrap();
            assert!(duct.pixels.contains(&(128, 128)));
        }
    }

    #[test]
    fn segmenter_recovers_clean_tree() {
        for w in [6.0, 12.0, 20.0, 34.0] {
            let p = generate(&PhantomSpec { tube_profile: 1.0, ..clean(w) }).unwrap();
            let seed = default_seed(256, 256).unwrap();
            let seg = run(&p.image, &seed, &ChanVeseParams::default()).unwrap();
            let d = dice(&seg.mask, &p.tree_mask);
            assert!(d >= 0.9, "width {w}: dice {d}");
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&clean(1.0)).is_err());
        assert!(generate(&PhantomSpec { fg_intensity: 10, bg_intensity: 20, ..clean(8.0) }).is_err());
        assert!(generate(&PhantomSpec { size: 64, duct_width_px: 60.0, ..clean(8.0) }).is_err());
        assert!(generate(&PhantomSpec { haze_strength: 1.0, ..clean(8.0) }).is_err());
    }

    #[test]
    fn corpus_is_balanced_disjoint_and_reproducible() {
        let base = PhantomSpec { size: 256, ..Default::default() };
        let corpus = generate_corpus(5, &base, 9).unwrap();
        assert_eq!(corpus.len(), 10);
        let dilated: Vec<f64> = corpus.iter().filter(|c| c.sample.label == Label::Dilated).map(|c| c.sample.duct_width_px).collect();
        let normal: Vec<f64> = corpus.iter().filter(|c| c.sample.label == Label::Normal).map(|c| c.sample.duct_width_px).collect();
        assert_eq!((dilated.len(), normal.len()), (5, 5));
        assert!(dilated.iter().all(|d| normal.iter().all(|n| d > n)));
        assert_eq!(corpus, generate_corpus(5, &base, 9).unwrap());
        assert!(generate_corpus(0, &base, 9).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(2, &PhantomSpec { size: 256, ..Default::default() }, 1).unwrap();
        let path = write_corpus(dir.path(), &corpus).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(MANIFEST_HEADER));
        let entries = read_manifest(&path).unwrap();
        assert_eq!(entries.len(), 4);
        for (e, c) in entries.iter().zip(&corpus) {
            assert_eq!(e.id, c.id);
            assert_eq!(load_entry(e).unwrap(), c.sample);
        }
    }
}
