//! Blob analysis, duct geometry, GLCM texture statistics, min-max scaling
//! and the feature CSV.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::classify::Label;
use crate::error::{Error, Result};
use crate::raster::{GrayImage, Mask, WORK_SIDE};

pub const DEFAULT_GLCM_LEVELS: usize = 8;

pub const FEATURE_NAMES: [&str; 10] = ["mja", "mia", "bda", "iba", "cmp", "ar", "cont", "mean", "var", "corr"];
pub const REDUCED_NAMES: [&str; 4] = ["mja", "ar", "mia", "cmp"];
pub const CSV_HEADER: &str = "id,label,mja,mia,bda,iba,cmp,ar,cont,mean,var,corr";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_row: usize,
    pub min_col: usize,
    pub max_row: usize,
    pub max_col: usize,
}

impl BoundingBox {
    pub fn width(&self) -> usize {
        self.max_col - self.min_col + 1
    }

    pub fn height(&self) -> usize {
        self.max_row - self.min_row + 1
    }
}

/// One 8-connected foreground component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Blob {
    /// `(row, col)` in discovery order.
    pub pixels: Vec<(usize, usize)>,
    pub bbox: BoundingBox,
    /// Number of 4-neighbor pixel edges facing background or the image border.
    pub perimeter: usize,
}

impl Blob {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn to_mask(&self, width: usize, height: usize) -> Mask {
        let mut m = Mask::empty(width, height);
        for &(r, c) in &self.pixels {
            m.set(r, c, true);
        }
        m
    }
}

/// Component label per pixel (0 = background, components numbered from 1 in
/// raster order of their first pixel) and the component count.
pub fn label_components(mask: &Mask) -> (Vec<u32>, usize) {
    let (w, h) = mask.dims();
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.data()[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let q = rr as usize * w + cc as usize;
                    if mask.data()[q] && labels[q] == 0 {
                        labels[q] = next;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// 8-connected components with area, bounding box and exposed-edge perimeter.
pub fn connected_components(mask: &Mask) -> Vec<Blob> {
    let (w, h) = mask.dims();
    let (labels, count) = label_components(mask);
    let mut blobs: Vec<Blob> = (0..count)
        .map(|_| Blob {
            pixels: Vec::new(),
            bbox: BoundingBox { min_row: usize::MAX, min_col: usize::MAX, max_row: 0, max_col: 0 },
            perimeter: 0,
        })
        .collect();
    for r in 0..h {
        for c in 0..w {
            let l = labels[r * w + c];
            if l == 0 {
                continue;
            }
            let b = &mut blobs[l as usize - 1];
            b.pixels.push((r, c));
            b.bbox.min_row = b.bbox.min_row.min(r);
            b.bbox.min_col = b.bbox.min_col.min(c);
            b.bbox.max_row = b.bbox.max_row.max(r);
            b.bbox.max_col = b.bbox.max_col.max(c);
            let exposed = [(r > 0).then(|| (r - 1, c)), (r + 1 < h).then(|| (r + 1, c)), (c > 0).then(|| (r, c - 1)), (c + 1 < w).then(|| (r, c + 1))]
                .iter()
                .filter(|n| n.is_none_or(|(rr, cc)| !mask.get(rr, cc)))
                .count();
            b.perimeter += exposed;
        }
    }
    blobs
}

/// Largest blob; equal areas resolve to the bounding box that starts highest,
/// then leftmost.
pub fn bile_duct_of(blobs: &[Blob]) -> Result<&Blob> {
    blobs
        .iter()
        .min_by(|a, b| {
            b.area()
                .cmp(&a.area())
                .then(a.bbox.min_row.cmp(&b.bbox.min_row))
                .then(a.bbox.min_col.cmp(&b.bbox.min_col))
        })
        .ok_or_else(|| Error::NoRegion("no blob in the segmentation mask".into()))
}

/// `(major, minor)` axis lengths in pixels: the larger and smaller of the
/// bounding-box width and height.
pub fn axes(duct: &Blob) -> (usize, usize) {
    let (w, h) = (duct.bbox.width(), duct.bbox.height());
    (w.max(h), w.min(h))
}

/// `P² / (4π a)`.
pub fn compactness(duct: &Blob) -> f64 {
    compactness_of(duct.perimeter as f64, duct.area() as f64)
}

pub fn compactness_of(perimeter: f64, area: f64) -> f64 {
    perimeter * perimeter / (4.0 * PI * area)
}

/// Normalized, symmetric gray-level co-occurrence matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Glcm {
    pub levels: usize,
    /// Row-major `levels × levels` probabilities.
    pub matrix: Vec<f64>,
}

impl Glcm {
    pub fn p(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.levels + j]
    }
}

/// Level of an 8-bit intensity after quantizing `[0, 255]` into `levels`
/// equal bins.
#[inline]
pub fn quantize_level(v: u8, levels: usize) -> usize {
    usize::from(v) * levels / 256
}

/// Co-occurrence of horizontally adjacent pixel pairs `(r, c), (r, c + 1)`
/// where both lie in the mask, symmetrized and normalized.
pub fn glcm(img: &GrayImage, mask: &Mask, levels: usize) -> Result<Glcm> {
    if levels < 2 {
        return Err(Error::InvalidParameter(format!("glcm needs at least 2 levels, got {levels}")));
    }
    if img.dims() != mask.dims() {
        return Err(Error::DimensionMismatch("glcm image and mask differ in size".into()));
    }
    let (w, h) = img.dims();
    let mut counts = vec![0u64; levels * levels];
    let mut pairs = 0u64;
    for r in 0..h {
        for c in 0..w.saturating_sub(1) {
            if mask.get(r, c) && mask.get(r, c + 1) {
                let i = quantize_level(img.get(r, c), levels);
                let j = quantize_level(img.get(r, c + 1), levels);
                counts[i * levels + j] += 1;
                counts[j * levels + i] += 1;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::DegenerateTexture);
    }
    let total = (2 * pairs) as f64;
    Ok(Glcm { levels, matrix: counts.iter().map(|&n| n as f64 / total).collect() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlcmStats {
    pub contrast: f64,
    pub mean: f64,
    pub variance: f64,
    pub correlation: f64,
    /// Zero variance: correlation is reported as 1.
    pub degenerate: bool,
}

/// Contrast `Σ p(i−j)²`, mean `Σ i p`, variance `Σ p(i−μ)²` and correlation
/// `Σ p(i−μ)(j−μ)/σ²`.
pub fn glcm_stats(g: &Glcm) -> GlcmStats {
    let n = g.levels;
    let mut mean = 0.0;
    let mut contrast = 0.0;
    for i in 0..n {
        for j in 0..n {
            let p = g.p(i, j);
            mean += i as f64 * p;
            contrast += p * ((i as f64) - (j as f64)).powi(2);
        }
    }
    let mut variance = 0.0;
    let mut covariance = 0.0;
    for i in 0..n {
        for j in 0..n {
            let p = g.p(i, j);
            let (di, dj) = (i as f64 - mean, j as f64 - mean);
            variance += p * di * di;
            covariance += p * di * dj;
        }
    }
    // round-off can leave a constant texture with a variance of ~1e-17
    let degenerate = variance <= 1e-12;
    let correlation = if degenerate { 1.0 } else { (covariance / variance).clamp(-1.0, 1.0) };
    GlcmStats { contrast, mean, variance, correlation, degenerate }
}

/// The ten per-image measurements.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// Major axis over the normalization side.
    pub mja: f64,
    /// Minor axis over the normalization side.
    pub mia: f64,
    /// Bile-duct area in pixels.
    pub bda: f64,
    /// Biliary-tree area in pixels.
    pub iba: f64,
    pub cmp: f64,
    /// `bda / iba`.
    pub ar: f64,
    pub cont: f64,
    pub mean: f64,
    pub var: f64,
    pub corr: f64,
}

impl FeatureVector {
    /// Values in [`FEATURE_NAMES`] order.
    pub fn to_array(&self) -> [f64; 10] {
        [self.mja, self.mia, self.bda, self.iba, self.cmp, self.ar, self.cont, self.mean, self.var, self.corr]
    }

    pub fn from_array(v: [f64; 10]) -> Self {
        Self { mja: v[0], mia: v[1], bda: v[2], iba: v[3], cmp: v[4], ar: v[5], cont: v[6], mean: v[7], var: v[8], corr: v[9] }
    }
}

/// `(mja, ar, mia, cmp)`.
pub fn reduce(v: &FeatureVector) -> [f64; 4] {
    [v.mja, v.ar, v.mia, v.cmp]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    #[default]
    Reduced4,
    Full10,
}

impl FeatureMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reduced4" => Ok(Self::Reduced4),
            "full10" => Ok(Self::Full10),
            other => Err(Error::Config(format!("feature mode `{other}` (expected reduced4 or full10)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Reduced4 => "reduced4",
            Self::Full10 => "full10",
        }
    }

    pub fn feature_names(&self) -> Vec<&'static str> {
        match self {
            Self::Reduced4 => REDUCED_NAMES.to_vec(),
            Self::Full10 => FEATURE_NAMES.to_vec(),
        }
    }

    /// Selects the model inputs from a ten-value row in CSV order.
    pub fn select(&self, row: &[f64; 10]) -> Vec<f64> {
        match self {
            Self::Reduced4 => reduce(&FeatureVector::from_array(*row)).to_vec(),
            Self::Full10 => row.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Divisor for the axis lengths (the working image side).
    pub axis_normalizer: f64,
    pub glcm_levels: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { axis_normalizer: WORK_SIDE as f64, glcm_levels: DEFAULT_GLCM_LEVELS }
    }
}

/// Extraction output plus the texture degeneracy flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extracted {
    pub features: FeatureVector,
    pub texture_degenerate: bool,
}

pub fn extract(img: &GrayImage, tree: &Mask, duct: &Blob) -> Result<Extracted> {
    extract_with(img, tree, duct, &FeatureConfig::default())
}

pub fn extract_with(img: &GrayImage, tree: &Mask, duct: &Blob, cfg: &FeatureConfig) -> Result<Extracted> {
    let iba = tree.count();
    if iba == 0 {
        return Err(Error::NoRegion("empty biliary-tree mask".into()));
    }
    let (tw, th) = tree.dims();
    if duct.pixels.iter().any(|&(r, c)| r >= th || c >= tw || !tree.get(r, c)) {
        return Err(Error::InvalidParameter("duct blob is not contained in the tree mask".into()));
    }
    let (major, minor) = axes(duct);
    let stats = glcm_stats(&glcm(img, tree, cfg.glcm_levels)?);
    let bda = duct.area() as f64;
    Ok(Extracted {
        features: FeatureVector {
            mja: major as f64 / cfg.axis_normalizer,
            mia: minor as f64 / cfg.axis_normalizer,
            bda,
            iba: iba as f64,
            cmp: compactness(duct),
            ar: bda / iba as f64,
            cont: stats.contrast,
            mean: stats.mean,
            var: stats.variance,
            corr: stats.correlation,
        },
        texture_degenerate: stats.degenerate,
    })
}

/// Per-feature minimum and maximum of a fitted dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerState {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn fit_scaler<R: AsRef<[f64]>>(rows: &[R]) -> Result<ScalerState> {
    let first = rows.first().ok_or_else(|| Error::InvalidParameter("cannot fit a scaler on no rows".into()))?;
    let d = first.as_ref().len();
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for row in rows {
        let row = row.as_ref();
        if row.len() != d {
            return Err(Error::DimensionMismatch(format!("row of {} features, expected {d}", row.len())));
        }
        for k in 0..d {
            min[k] = min[k].min(row[k]);
            max[k] = max[k].max(row[k]);
        }
    }
    Ok(ScalerState { min, max })
}

/// `(v − min) / (max − min)` per feature; a constant feature maps to 0.
pub fn apply_scaler(s: &ScalerState, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != s.min.len() {
        return Err(Error::DimensionMismatch(format!("vector of {} features, scaler has {}", v.len(), s.min.len())));
    }
    Ok(v.iter()
        .enumerate()
        .map(|(k, &x)| {
            let span = s.max[k] - s.min[k];
            if span > 0.0 {
                (x - s.min[k]) / span
            } else {
                0.0
            }
        })
        .collect())
}

/// One line of the feature CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub id: String,
    pub label: Label,
    pub values: [f64; 10],
    /// Degenerate rows are written as `#degenerate,…` comment lines.
    pub degenerate: bool,
}

/// Writes the header and rows; reals with six decimals.
pub fn write_feature_csv<W: Write>(rows: &[FeatureRow], out: W) -> Result<()> {
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "{CSV_HEADER}")?;
    for row in rows {
        if row.degenerate {
            write!(w, "#degenerate,")?;
        }
        write!(w, "{},{}", row.id, row.label.name())?;
        for v in &row.values {
            write!(w, ",{v:.6}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_feature_csv`], including flagged degenerate
/// rows.
pub fn read_feature_csv<R: Read>(input: R) -> Result<Vec<FeatureRow>> {
    let mut text = String::new();
    std::io::BufReader::new(input).read_to_string(&mut text)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == CSV_HEADER => {}
        Some(h) => return Err(Error::Parse { token: h.to_string(), reason: "unexpected feature CSV header".into() }),
        None => return Err(Error::Parse { token: "<eof>".into(), reason: "empty feature CSV".into() }),
    }
    let body: String = lines
        .map(|l| l.strip_prefix("#degenerate,").map_or_else(|| format!("0,{l}\n"), |rest| format!("1,{rest}\n")))
        .collect();
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(body.as_bytes());
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse { token: "csv".into(), reason: e.to_string() })?;
        if record.len() != 13 {
            return Err(Error::Parse { token: record.as_slice().to_string(), reason: format!("{} fields, expected 12", record.len() - 1) });
        }
        let label = Label::parse(&record[2])?;
        let mut values = [0.0; 10];
        for (k, v) in values.iter_mut().enumerate() {
            let tok = &record[3 + k];
            *v = tok
                .parse()
                .map_err(|_| Error::Parse { token: tok.to_string(), reason: format!("{} is not a number", FEATURE_NAMES[k]) })?;
        }
        rows.push(FeatureRow { id: record[1].to_string(), label, values, degenerate: &record[0] == "1" });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_of(rows: &[&str]) -> Mask {
        Mask::from_fn(rows[0].len(), rows.len(), |r, c| rows[r].as_bytes()[c] == b'#')
    }

    /// Recursive 8-connected flood fill, used as an independent labeling.
    fn flood_labels(mask: &Mask) -> Vec<u32> {
        fn fill(mask: &Mask, labels: &mut [u32], r: isize, c: isize, l: u32) {
            let (w, h) = (mask.width() as isize, mask.height() as isize);
            if r < 0 || c < 0 || r >= h || c >= w {
                return;
            }
            let i = (r * w + c) as usize;
            if !mask.data()[i] || labels[i] != 0 {
                return;
            }
            labels[i] = l;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    fill(mask, labels, r + dr, c + dc, l);
                }
            }
        }
        let mut labels = vec![0; mask.data().len()];
        let mut next = 0;
        for r in 0..mask.height() {
            for c in 0..mask.width() {
                if mask.get(r, c) && labels[r * mask.width() + c] == 0 {
                    next += 1;
                    fill(mask, &mut labels, r as isize, c as isize, next);
                }
            }
        }
        labels
    }

    #[test]
    fn plus_shape() {
        let m = mask_of(&[".#.", "###", ".#."]);
        let blobs = connected_components(&m);
        assert_eq!(blobs.len(), 1);
        assert_eq!(blobs[0].area(), 5);
        assert_eq!(blobs[0].perimeter, 12);
    }

    #[test]
    fn diagonal_pixels_connect() {
        let m = mask_of(&["#.", ".#"]);
        assert_eq!(connected_components(&m).len(), 1);
        assert_eq!(connected_components(&m)[0].perimeter, 8);
    }

    #[test]
    fn labeling_matches_flood_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let m = Mask::from_fn(16, 16, |_, _| rng.random_bool(0.4));
            assert_eq!(label_components(&m).0, flood_labels(&m));
        }
    }

    #[test]
    fn duct_selection() {
        let m = mask_of(&["###.#", "###..", "###.#"]);
        let blobs = connected_components(&m);
        assert_eq!(bile_duct_of(&blobs).unwrap().area(), 9);
        let single = connected_components(&mask_of(&["#"]));
        assert_eq!(bile_duct_of(&single).unwrap(), &single[0]);
        assert!(matches!(bile_duct_of(&[]), Err(Error::NoRegion(_))));
        // equal areas: the blob whose box starts higher wins, even if found later
        let tie = mask_of(&["...##", "#....", "#...."]);
        let blobs = connected_components(&tie);
        assert_eq!(bile_duct_of(&blobs).unwrap().bbox.min_row, 0);
        let side = mask_of(&["#..#", "#..#"]);
        assert_eq!(bile_duct_of(&connected_components(&side)).unwrap().bbox.min_col, 0);
    }

    #[test]
    fn axis_examples() {
        let rect = connected_components(&Mask::from_fn(10, 4, |_, _| true));
        assert_eq!(axes(&rect[0]), (10, 4));
        assert_eq!(axes(&connected_components(&mask_of(&["#"]))[0]), (1, 1));
        let l_shape = Mask::from_fn(6, 10, |r, c| c == 0 || r == 9);
        assert_eq!(axes(&connected_components(&l_shape)[0]), (10, 6));
    }

    #[test]
    fn compactness_examples() {
        let r: f64 = 7.5;
        assert!((compactness_of(2.0 * PI * r, PI * r * r) - 1.0).abs() < 1e-12);
        let s: f64 = 3.0;
        assert!((compactness_of(4.0 * s, s * s) - 4.0 / PI).abs() < 1e-12);
        let square = connected_components(&Mask::from_fn(5, 5, |_, _| true));
        assert!((compactness(&square[0]) - 4.0 / PI).abs() < 1e-12);
        let disk = Mask::from_fn(50, 50, |r, c| {
            let (dy, dx) = (r as f64 - 25.0, c as f64 - 25.0);
            dy * dy + dx * dx <= 400.0
        });
        let blob = &connected_components(&disk)[0];
        let cmp = compactness(blob);
        assert!((1.0..=1.8).contains(&cmp), "cmp {cmp}");
        // the exposed-edge perimeter of a disk is its bounding-box perimeter
        assert_eq!(blob.perimeter, 4 * 41);
    }

    #[test]
    fn glcm_examples() {
        let flat = GrayImage::filled(4, 4, 200);
        let full = Mask::from_fn(4, 4, |_, _| true);
        let g = glcm(&flat, &full, 8).unwrap();
        assert_eq!(g.p(6, 6), 1.0);
        let s = glcm_stats(&g);
        assert_eq!((s.contrast, s.variance, s.correlation, s.degenerate), (0.0, 0.0, 1.0, true));

        let checker = GrayImage::from_fn(2, 2, |r, c| if (r + c) % 2 == 0 { 0 } else { 255 });
        let g = glcm(&checker, &Mask::from_fn(2, 2, |_, _| true), 2).unwrap();
        assert_eq!((g.p(0, 1), g.p(1, 0), g.p(0, 0), g.p(1, 1)), (0.5, 0.5, 0.0, 0.0));
        let s = glcm_stats(&g);
        assert_eq!((s.mean, s.variance, s.contrast, s.correlation), (0.5, 0.25, 1.0, -1.0));
        assert!(!s.degenerate);

        assert!(matches!(glcm(&checker, &Mask::from_fn(2, 2, |_, c| c == 0), 2), Err(Error::DegenerateTexture)));
        assert!(glcm(&checker, &Mask::from_fn(2, 2, |_, _| true), 1).is_err());
    }

    #[test]
    fn extract_examples() {
        // tree: 10x20 block; duct: 5x10 sub-block
        let tree = Mask::from_fn(40, 40, |r, c| (5..25).contains(&r) && (5..15).contains(&c));
        let duct_mask = Mask::from_fn(40, 40, |r, c| (5..15).contains(&r) && (5..10).contains(&c));
        let img = GrayImage::from_fn(40, 40, |r, c| if tree.get(r, c) { 200 } else { 10 });
        let duct = &connected_components(&duct_mask)[0];
        let e = extract(&img, &tree, duct).unwrap().features;
        assert_eq!((e.bda, e.iba), (50.0, 200.0));
        assert_eq!(e.ar, 0.25);
        assert_eq!((e.mja, e.mia), (10.0 / 512.0, 5.0 / 512.0));
        let whole = &connected_components(&tree)[0];
        assert_eq!(extract(&img, &tree, whole).unwrap().features.ar, 1.0);
        assert!(matches!(extract(&img, &Mask::empty(40, 40), duct), Err(Error::NoRegion(_))));
    }

    #[test]
    fn wide_duct_dominates_narrow() {
        let features = |width: usize| {
            let tree = Mask::from_fn(128, 128, |r, c| {
                let duct = (20..100).contains(&r) && (64 - width / 2..64 + width / 2).contains(&c);
                let branch = (10..14).contains(&r) && (20..108).contains(&c);
                duct || branch
            });
            let img = GrayImage::from_fn(128, 128, |r, c| if tree.get(r, c) { 220 } else { 30 });
            let blobs = connected_components(&tree);
            extract(&img, &tree, bile_duct_of(&blobs).unwrap()).unwrap().features
        };
        let (wide, narrow) = (features(24), features(8));
        assert!(wide.mja >= narrow.mja && wide.mia > narrow.mia && wide.ar > narrow.ar);
    }

    #[test]
    fn scaler_examples() {
        let rows = vec![vec![4.0, 1.0, 7.0], vec![18.0, 3.0, 7.0], vec![11.0, 2.0, 7.0]];
        let s = fit_scaler(&rows).unwrap();
        assert_eq!(apply_scaler(&s, &rows[0]).unwrap(), vec![0.0, 0.0, 0.0]);
        assert_eq!(apply_scaler(&s, &rows[1]).unwrap(), vec![1.0, 1.0, 0.0]);
        let v = apply_scaler(&s, &[9.78, 2.0, 7.0]).unwrap();
        assert!((v[0] - 0.4129).abs() < 5e-5, "{}", v[0]);
        assert!(fit_scaler::<Vec<f64>>(&[]).is_err());
        assert!(apply_scaler(&s, &[1.0]).is_err());
    }

    #[test]
    fn reduce_picks_named_components() {
        let v = FeatureVector::from_array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        assert_eq!(reduce(&v), [1.0, 6.0, 2.0, 5.0]);
        assert_eq!(FeatureMode::Full10.select(&v.to_array()).len(), 10);
        assert_eq!(FeatureMode::parse("full10").unwrap(), FeatureMode::Full10);
        assert!(FeatureMode::parse("five").is_err());
    }

    #[test]
    fn scale_then_reduce_commutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<[f64; 10]> = (0..12).map(|_| std::array::from_fn(|_| rng.random_range(-5.0..5.0))).collect();
        let full = fit_scaler(&rows).unwrap();
        let reduced_rows: Vec<Vec<f64>> = rows.iter().map(|r| FeatureMode::Reduced4.select(r)).collect();
        let reduced = fit_scaler(&reduced_rows).unwrap();
        for r in &rows {
            let a: [f64; 10] = apply_scaler(&full, r).unwrap().try_into().unwrap();
            let b = apply_scaler(&reduced, &FeatureMode::Reduced4.select(r)).unwrap();
            assert_eq!(FeatureMode::Reduced4.select(&a), b);
        }
    }

    #[test]
    fn csv_round_trip_and_format() {
        let rows = vec![
            FeatureRow { id: "p001".into(), label: Label::Dilated, values: [0.5; 10], degenerate: false },
            FeatureRow { id: "p002".into(), label: Label::Normal, values: [0.25; 10], degenerate: true },
        ];
        let mut buf = Vec::new();
        write_feature_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "p001,dilated,0.500000,0.500000,0.500000,0.500000,0.500000,0.500000,0.500000,0.500000,0.500000,0.500000");
        assert!(lines[2].starts_with("#degenerate,p002,normal,0.250000"));
        assert_eq!(read_feature_csv(buf.as_slice()).unwrap(), rows);
        assert!(read_feature_csv("id,label\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn blobs_partition_foreground(cells in proptest::collection::vec(any::<bool>(), 144)) {
            let m = Mask::new(12, 12, cells).unwrap();
            let blobs = connected_components(&m);
            prop_assert_eq!(blobs.iter().map(Blob::area).sum::<usize>(), m.count());
            let mut seen = Mask::empty(12, 12);
            for b in &blobs {
                prop_assert!(b.perimeter >= 4);
                for &(r, c) in &b.pixels {
                    prop_assert!(!seen.get(r, c));
                    seen.set(r, c, true);
                }
            }
            prop_assert_eq!(seen, m);
        }

        #[test]
        fn glcm_normalized_symmetric_and_bounded(
            px in proptest::collection::vec(any::<u8>(), 64),
            cells in proptest::collection::vec(any::<bool>(), 64),
        ) {
            let img = GrayImage::new(8, 8, px).unwrap();
            let mask = Mask::new(8, 8, cells).unwrap();
            if let Ok(g) = glcm(&img, &mask, 8) {
                prop_assert!((g.matrix.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for i in 0..8 {
                    for j in 0..8 {
                        prop_assert_eq!(g.p(i, j), g.p(j, i));
                    }
                }
                let s = glcm_stats(&g);
                prop_assert!((-1.0..=1.0).contains(&s.correlation));
                let col_mean: f64 = (0..8).flat_map(|i| (0..8).map(move |j| (i, j))).map(|(i, j)| j as f64 * g.p(i, j)).sum();
                prop_assert!((col_mean - s.mean).abs() < 1e-12);
            }
        }

        #[test]
        fn scaled_training_rows_lie_in_unit_interval(rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 3), 1..20)) {
            let s = fit_scaler(&rows).unwrap();
            for r in &rows {
                for v in apply_scaler(&s, r).unwrap() {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }
}
