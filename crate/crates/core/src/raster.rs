//! Image containers, netpbm I/O and the point/kernel operations of the
//! preprocessing cascade.
//!
//! Every operation that produces an integer pixel rounds half up and clamps
//! to `[0, 255]`. 3×3 kernels replicate edge pixels.

use crate::error::{Error, Result};

/// Side length of the pipeline working raster.
pub const WORK_SIDE: usize = 512;

/// 8-bit single channel raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::DimensionMismatch(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} bytes for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Constant image. Panics on a zero dimension.
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.data[row * self.width + col] = v;
    }

    /// Pixel at a possibly out-of-range coordinate, clamped to the nearest edge.
    #[inline]
    pub fn get_replicated(&self, row: isize, col: isize) -> u8 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.get(r, c)
    }

    pub fn map(&self, f: impl Fn(u8) -> u8) -> Self {
        Self { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn to_real(&self) -> RealImage {
        RealImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f64::from(v)).collect(),
        }
    }
}

/// Interleaved 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<[u8; 3]>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} pixels for a {width}x{height} rgb image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[[u8; 3]] {
        &self.data
    }

    /// Splits into three gray planes (red, green, blue).
    pub fn planes(&self) -> [GrayImage; 3] {
        let plane = |k: usize| GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|p| p[k]).collect(),
        };
        [plane(0), plane(1), plane(2)]
    }

    pub fn from_planes(planes: &[GrayImage; 3]) -> Result<Self> {
        let (w, h) = planes[0].dims();
        if planes.iter().any(|p| p.dims() != (w, h)) {
            return Err(Error::DimensionMismatch("rgb planes differ in size".into()));
        }
        let data = (0..w * h)
            .map(|i| [planes[0].data[i], planes[1].data[i], planes[2].data[i]])
            .collect();
        Ok(Self { width: w, height: h, data })
    }
}

/// Real-valued raster used between quantization steps.
#[derive(Clone, Debug, PartialEq)]
pub struct RealImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RealImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("real image contains non-finite values".into()));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Rounds half up and clamps into an 8-bit image.
    pub fn quantize(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| quantize_pixel(v)).collect(),
        }
    }
}

/// Round half up, then clamp to `[0, 255]`.
#[inline]
pub fn quantize_pixel(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Binary raster. Serialized as a P5 graymap with values {0, 255}.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} cells for a {width}x{height} mask",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be positive");
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(width, height);
        for r in 0..height {
            for c in 0..width {
                m.data[r * width + c] = f(r, c);
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Foreground 255, background 0.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| if v { 255 } else { 0 }).collect(),
        }
    }

    /// Any non-zero pixel is foreground.
    pub fn from_gray(img: &GrayImage) -> Self {
        Self { width: img.width, height: img.height, data: img.data.iter().map(|&v| v != 0).collect() }
    }
}

/// Decoded netpbm payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AnyImage {
    Gray(GrayImage),
    Rgb(RgbImage),
}

impl AnyImage {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            AnyImage::Gray(g) => g.dims(),
            AnyImage::Rgb(c) => (c.width(), c.height()),
        }
    }
}

struct Header {
    magic: String,
    width: usize,
    height: usize,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 0usize;
    let mut tokens: Vec<String> = Vec::with_capacity(4);
    while tokens.len() < 4 {
        // whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        if pos >= bytes.len() {
            let which = ["magic", "width", "height", "maxval"][tokens.len()];
            return Err(Error::Parse { token: "<eof>".into(), reason: format!("missing {which}") });
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        if tokens.len() == 1 && tokens[0] != "P5" && tokens[0] != "P6" {
            return Err(Error::UnsupportedFormat(format!("magic `{}` (only P5 and P6)", tokens[0])));
        }
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() {
        return Err(Error::Parse { token: tokens[3].clone(), reason: "no raster after maxval".into() });
    }
    pos += 1;

    let number = |tok: &str, what: &str| -> Result<usize> {
        tok.parse::<usize>()
            .map_err(|_| Error::Parse { token: tok.to_string(), reason: format!("{what} is not a number") })
    };
    let width = number(&tokens[1], "width")?;
    let height = number(&tokens[2], "height")?;
    let maxval = number(&tokens[3], "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Parse { token: format!("{width} {height}"), reason: "zero dimension".into() });
    }
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("maxval {maxval} (only 255)")));
    }
    Ok(Header { magic: tokens.swap_remove(0), width, height, body_offset: pos })
}

/// Decodes a binary P5 graymap with maxval 255.
pub fn load_pgm(bytes: &[u8]) -> Result<GrayImage> {
    match load_netpbm(bytes)? {
        AnyImage::Gray(g) => Ok(g),
        AnyImage::Rgb(_) => Err(Error::UnsupportedFormat("expected P5 graymap, found P6".into())),
    }
}

/// Decodes a binary P6 pixmap with maxval 255.
pub fn load_ppm(bytes: &[u8]) -> Result<RgbImage> {
    match load_netpbm(bytes)? {
        AnyImage::Rgb(c) => Ok(c),
        AnyImage::Gray(_) => Err(Error::UnsupportedFormat("expected P6 pixmap, found P5".into())),
    }
}

/// Decodes either P5 or P6.
pub fn load_netpbm(bytes: &[u8]) -> Result<AnyImage> {
    let h = parse_header(bytes)?;
    let channels = if h.magic == "P5" { 1 } else { 3 };
    let need = h.width * h.height * channels;
    let body = &bytes[h.body_offset..];
    if body.len() < need {
        return Err(Error::Parse {
            token: format!("{} bytes", body.len()),
            reason: format!("raster truncated, expected {need} bytes"),
        });
    }
    let body = &body[..need];
    if channels == 1 {
        Ok(AnyImage::Gray(GrayImage { width: h.width, height: h.height, data: body.to_vec() }))
    } else {
        let data = body.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
        Ok(AnyImage::Rgb(RgbImage { width: h.width, height: h.height, data }))
    }
}

/// Encodes as a binary P5 graymap: `P5\n<w> <h>\n255\n` followed by the raster.
pub fn save_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn save_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for p in &img.data {
        out.extend_from_slice(p);
    }
    out
}

/// Weighted luminance `0.3 R + 0.59 G + 0.11 B`.
pub fn to_grayscale(img: &RgbImage) -> GrayImage {
    GrayImage {
        width: img.width,
        height: img.height,
        data: img
            .data
            .iter()
            .map(|&[r, g, b]| quantize_pixel(0.3 * f64::from(r) + 0.59 * f64::from(g) + 0.11 * f64::from(b)))
            .collect(),
    }
}

/// Bilinear resize with corner-aligned sampling: output corners map exactly
/// onto input corners.
pub fn resize_bilinear(img: &GrayImage, out_w: usize, out_h: usize) -> GrayImage {
    assert!(out_w > 0 && out_h > 0, "output dimensions must be positive");
    if img.dims() == (out_w, out_h) {
        return img.clone();
    }
    let scale = |n_in: usize, n_out: usize| {
        if n_out > 1 {
            (n_in - 1) as f64 / (n_out - 1) as f64
        } else {
            0.0
        }
    };
    let sy = scale(img.height, out_h);
    let sx = scale(img.width, out_w);
    // per-column source indices and weights are shared by all rows
    let cols: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|c| {
            let x = c as f64 * sx;
            let x0 = (x.floor() as usize).min(img.width - 1);
            let x1 = (x0 + 1).min(img.width - 1);
            (x0, x1, x - x0 as f64)
        })
        .collect();
    let mut data = Vec::with_capacity(out_w * out_h);
    for r in 0..out_h {
        let y = r as f64 * sy;
        let y0 = (y.floor() as usize).min(img.height - 1);
        let y1 = (y0 + 1).min(img.height - 1);
        let fy = y - y0 as f64;
        for &(x0, x1, fx) in &cols {
            let top = f64::from(img.get(y0, x0)) * (1.0 - fx) + f64::from(img.get(y0, x1)) * fx;
            let bot = f64::from(img.get(y1, x0)) * (1.0 - fx) + f64::from(img.get(y1, x1)) * fx;
            data.push(quantize_pixel(top * (1.0 - fy) + bot * fy));
        }
    }
    GrayImage { width: out_w, height: out_h, data }
}

pub fn resize_to_512(img: &GrayImage) -> GrayImage {
    resize_bilinear(img, WORK_SIDE, WORK_SIDE)
}

/// Per-channel bilinear resize of an RGB image.
pub fn resize_rgb(img: &RgbImage, out_w: usize, out_h: usize) -> RgbImage {
    let [r, g, b] = img.planes();
    let planes = [
        resize_bilinear(&r, out_w, out_h),
        resize_bilinear(&g, out_w, out_h),
        resize_bilinear(&b, out_w, out_h),
    ];
    RgbImage::from_planes(&planes).expect("planes share dimensions")
}

pub fn complement(img: &GrayImage) -> GrayImage {
    img.map(|v| 255 - v)
}

/// 3×3 box mean with replicated borders, unquantized.
pub fn box_blur3(img: &GrayImage) -> RealImage {
    let mut out = RealImage::zeros(img.width, img.height);
    for r in 0..img.height {
        for c in 0..img.width {
            let mut acc = 0u32;
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    acc += u32::from(img.get_replicated(r as isize + dr, c as isize + dc));
                }
            }
            out.data[r * img.width + c] = f64::from(acc) / 9.0;
        }
    }
    out
}

/// Unsharp mask with a 3×3 box blur: `in + amount·(in − blur(in))`.
pub fn sharpen_with(img: &GrayImage, amount: f64) -> GrayImage {
    let blur = box_blur3(img);
    GrayImage {
        width: img.width,
        height: img.height,
        data: img
            .data
            .iter()
            .zip(&blur.data)
            .map(|(&v, &b)| {
                let v = f64::from(v);
                quantize_pixel(v + amount * (v - b))
            })
            .collect(),
    }
}

pub fn sharpen(img: &GrayImage) -> GrayImage {
    sharpen_with(img, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p5(w: usize, h: usize, body: &[u8]) -> Vec<u8> {
        let mut b = format!("P5\n{w} {h}\n255\n").into_bytes();
        b.extend_from_slice(body);
        b
    }

    #[test]
    fn load_pgm_maps_bytes_row_major() {
        let img = load_pgm(&p5(2, 2, &[0, 1, 2, 3])).unwrap();
        assert_eq!(img.dims(), (2, 2));
        assert_eq!(img.get(0, 0), 0);
        assert_eq!(img.get(0, 1), 1);
        assert_eq!(img.get(1, 0), 2);
        assert_eq!(img.get(1, 1), 3);
    }

    #[test]
    fn load_pgm_rejects_ascii_and_deep_maps() {
        let ascii = b"P2\n2 2\n255\n0 1 2 3\n";
        assert!(matches!(load_pgm(ascii), Err(Error::UnsupportedFormat(_))));
        let deep = b"P5\n1 1\n65535\n\0\0";
        assert!(matches!(load_pgm(deep), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn load_pgm_names_bad_token() {
        match load_pgm(b"P5\n2 x\n255\n\0\0\0\0") {
            Err(Error::Parse { token, .. }) => assert_eq!(token, "x"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(load_pgm(b"P5\n2 2\n255\n\0"), Err(Error::Parse { .. })));
        assert!(matches!(load_pgm(b""), Err(Error::Parse { .. })));
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = load_pgm(b"P5 # made by hand\n1 1\n255\n\x07").unwrap();
        assert_eq!(img.data(), &[7]);
    }

    #[test]
    fn save_pgm_smallest_case() {
        let img = GrayImage::new(1, 1, vec![7]).unwrap();
        assert_eq!(save_pgm(&img), b"P5\n1 1\n255\n\x07".to_vec());
    }

    #[test]
    fn save_pgm_size_arithmetic() {
        let img = GrayImage::filled(512, 512, 3);
        let header = b"P5\n512 512\n255\n".len();
        assert_eq!(save_pgm(&img).len(), header + 262_144);
    }

    #[test]
    fn ppm_round_trip() {
        let img = RgbImage::new(2, 1, vec![[1, 2, 3], [250, 251, 252]]).unwrap();
        assert_eq!(load_ppm(&save_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn grayscale_weights() {
        let img = RgbImage::new(3, 1, vec![[255, 255, 255], [0, 0, 0], [255, 0, 0]]).unwrap();
        assert_eq!(to_grayscale(&img).data(), &[255, 0, 77]);
    }

    #[test]
    fn grayscale_of_gray_triples_is_exact() {
        let data: Vec<[u8; 3]> = (0..=255u8).map(|v| [v, v, v]).collect();
        let img = RgbImage::new(256, 1, data).unwrap();
        let g = to_grayscale(&img);
        assert!(g.data().iter().enumerate().all(|(i, &v)| v as usize == i));
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = GrayImage::from_fn(512, 512, |r, c| ((r * 7 + c * 3) % 256) as u8);
        assert_eq!(resize_to_512(&img), img);
        let flat = GrayImage::filled(37, 11, 100);
        assert!(resize_to_512(&flat).data().iter().all(|&v| v == 100));
    }

    #[test]
    fn resize_matches_scalar_bilinear() {
        let src = GrayImage::from_fn(4, 4, |r, c| (r * 60 + c * 15) as u8);
        let out = resize_bilinear(&src, 9, 7);
        // independent per-pixel evaluation of the bilinear formula
        for r in 0..7 {
            for c in 0..9 {
                let y = r as f64 * 3.0 / 6.0;
                let x = c as f64 * 3.0 / 8.0;
                let (y0, x0) = (y.floor(), x.floor());
                let (y1, x1) = ((y0 + 1.0).min(3.0), (x0 + 1.0).min(3.0));
                let px = |yy: f64, xx: f64| f64::from(src.get(yy as usize, xx as usize));
                let (fy, fx) = (y - y0, x - x0);
                let v = px(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + px(y0, x1) * fx * (1.0 - fy)
                    + px(y1, x0) * (1.0 - fx) * fy
                    + px(y1, x1) * fx * fy;
                assert_eq!(out.get(r, c), (v + 0.5).floor() as u8, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn mask_gray_round_trip() {
        let m = Mask::from_fn(5, 3, |r, c| (r + c) % 2 == 0);
        let g = m.to_gray();
        assert!(g.data().iter().all(|&v| v == 0 || v == 255));
        assert_eq!(Mask::from_gray(&load_pgm(&save_pgm(&g)).unwrap()), m);
        assert_eq!(m.count(), 8);
    }

    #[test]
    fn complement_values() {
        let img = GrayImage::new(3, 1, vec![0, 100, 255]).unwrap();
        assert_eq!(complement(&img).data(), &[255, 155, 0]);
    }

    #[test]
    fn sharpen_flat_and_step() {
        let flat = GrayImage::filled(5, 4, 90);
        assert_eq!(sharpen(&flat), flat);
        // step 0|255: at the dark edge column blur = 85, 0 - 85 clamps to 0;
        // at the bright edge column blur = 170, 255 + 85 clamps to 255.
        let step = GrayImage::from_fn(4, 3, |_, c| if c < 2 { 0 } else { 255 });
        assert_eq!(sharpen(&step), step);
        // an interior ramp overshoots on both sides
        let ramp = GrayImage::from_fn(5, 1, |_, c| [10, 10, 100, 190, 190][c]);
        let s = sharpen(&ramp);
        // col 1: blur = (10+10+100)/3 = 40 -> 10 - 30 = -20 -> 0
        assert_eq!(s.get(0, 1), 0);
        // col 2: blur = 100 -> unchanged
        assert_eq!(s.get(0, 2), 100);
        // col 3: blur = (100+190+190)/3 = 160 -> 190 + 30 = 220
        assert_eq!(s.get(0, 3), 220);
    }

    proptest! {
        #[test]
        fn pgm_round_trip(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            let img = GrayImage::from_fn(w, h, |r, c| (seed.wrapping_mul(31).wrapping_add((r * 131 + c * 17) as u64) % 256) as u8);
            let bytes = save_pgm(&img);
            prop_assert_eq!(load_pgm(&bytes).unwrap(), img);
            prop_assert_eq!(save_pgm(&load_pgm(&bytes).unwrap()), bytes);
        }

        #[test]
        fn pointwise_ops_preserve_dims_and_complement_involutes(w in 1usize..10, h in 1usize..10, v in proptest::collection::vec(any::<u8>(), 100)) {
            let img = GrayImage::from_fn(w, h, |r, c| v[(r * w + c) % v.len()]);
            prop_assert_eq!(complement(&complement(&img)), img.clone());
            prop_assert_eq!(sharpen(&img).dims(), img.dims());
            prop_assert_eq!(resize_bilinear(&img, 7, 5).dims(), (7, 5));
        }
    }
}
