//! Residual convolutional denoiser.
//!
//! The network predicts the noise `R(y)` of a noisy image `y`; the denoised
//! estimate is `y − R(y)`. Every layer is a 3×3 zero-padded convolution,
//! optionally followed by an inference-mode batch-norm affine map and a ReLU.
//! Images are scaled to `[0, 1]` before entering the network.
//!
//! Weight files start with one text line per layer, `out_ch in_ch [relu] [bn]`,
//! then a blank line, then little-endian `f32` values in layer order: kernels
//! (`out × in × 3 × 3`, row-major), bias, and, for `bn` layers, scale, shift,
//! mean and variance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{quantize_pixel, GrayImage, RealImage};

pub const BN_EPS: f64 = 1e-5;
const TAPS: usize = 9;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    #[inline]
    fn inv_std(&self, c: usize) -> f64 {
        1.0 / (self.var[c] + BN_EPS).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out × in × 3 × 3`, row-major.
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
    pub relu: bool,
    pub batchnorm: Option<BatchNorm>,
}

impl ConvLayer {
    pub fn zeros(in_channels: usize, out_channels: usize, relu: bool, batchnorm: bool) -> Self {
        Self {
            in_channels,
            out_channels,
            kernels: vec![0.0; out_channels * in_channels * TAPS],
            bias: vec![0.0; out_channels],
            relu,
            batchnorm: batchnorm.then(|| BatchNorm::identity(out_channels)),
        }
    }

    #[inline]
    fn kernel(&self, o: usize, i: usize) -> &[f64] {
        let at = (o * self.in_channels + i) * TAPS;
        &self.kernels[at..at + TAPS]
    }

    fn validate(&self, index: usize) -> Result<()> {
        let shape = |what: &str| Error::ModelShape(format!("layer {index}: {what}"));
        if self.kernels.len() != self.out_channels * self.in_channels * TAPS {
            return Err(shape("kernel tensor is not out × in × 3 × 3"));
        }
        if self.bias.len() != self.out_channels {
            return Err(shape("bias length differs from out_channels"));
        }
        if let Some(bn) = &self.batchnorm {
            let n = self.out_channels;
            if bn.scale.len() != n || bn.shift.len() != n || bn.mean.len() != n || bn.var.len() != n {
                return Err(shape("batch-norm vectors differ from out_channels"));
            }
            if bn.var.iter().any(|&v| v < 0.0) {
                return Err(shape("negative batch-norm variance"));
            }
        }
        Ok(())
    }
}

/// Ordered stack of 3×3 convolution layers mapping one channel to one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualNet {
    layers: Vec<ConvLayer>,
}

impl ResidualNet {
    pub fn new(layers: Vec<ConvLayer>) -> Result<Self> {
        let net = Self { layers };
        net.validate()?;
        Ok(net)
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 3 {
            return Err(Error::ModelShape(format!("depth {} < 3", self.layers.len())));
        }
        if self.layers[0].in_channels != 1 {
            return Err(Error::ModelShape("first layer must take one channel".into()));
        }
        if self.layers.last().map(|l| l.out_channels) != Some(1) {
            return Err(Error::ModelShape("last layer must emit one channel".into()));
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::ModelShape(format!(
                    "layer {} emits {} channels but layer {} expects {}",
                    k,
                    pair[0].out_channels,
                    k + 1,
                    pair[1].in_channels
                )));
            }
        }
        for (k, l) in self.layers.iter().enumerate() {
            l.validate(k)?;
        }
        Ok(())
    }

    /// Standard layout: conv+ReLU, `depth − 2` × conv+BN+ReLU, conv.
    /// He-normal weights; the output layer starts near zero so the untrained
    /// net is close to the identity denoiser.
    pub fn dncnn(depth: usize, channels: usize, seed: u64) -> Result<Self> {
        if depth < 3 || channels == 0 {
            return Err(Error::ModelShape(format!("depth {depth}, channels {channels}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(depth);
        for k in 0..depth {
            let first = k == 0;
            let last = k == depth - 1;
            let cin = if first { 1 } else { channels };
            let cout = if last { 1 } else { channels };
            let mut layer = ConvLayer::zeros(cin, cout, !last, !first && !last);
            let std = (2.0 / (cin * TAPS) as f64).sqrt() * if last { 0.1 } else { 1.0 };
            let normal = Normal::new(0.0, std).expect("positive std");
            layer.kernels.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
            layers.push(layer);
        }
        Self::new(layers)
    }

    /// Residual `R(y)` of a `[0, 1]`-scaled image.
    pub fn residual(&self, input: &RealImage) -> RealImage {
        let (w, h) = (input.width, input.height);
        let mut act = input.data.clone();
        for layer in &self.layers {
            let z = conv_forward(layer, &act, w, h);
            act = activate(layer, &z, w * h).1;
        }
        RealImage { width: w, height: h, data: act }
    }

    /// Parameters that training updates, in a fixed order.
    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| {
            let (scale, shift): (&mut [f64], &mut [f64]) = match &mut l.batchnorm {
                Some(bn) => (&mut bn.scale, &mut bn.shift),
                None => (&mut [], &mut []),
            };
            l.kernels.iter_mut().chain(l.bias.iter_mut()).chain(scale.iter_mut()).chain(shift.iter_mut())
        })
    }

    /// Trainable parameters in [`Gradients`] order.
    pub fn params(&self) -> Vec<f64> {
        self.clone().params_mut().map(|v| *v).collect()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.parameter_count(), "parameter vector length");
        self.params_mut().zip(p).for_each(|(d, &v)| *d = v);
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.kernels.len() + l.bias.len() + l.batchnorm.as_ref().map_or(0, |b| 2 * b.scale.len()))
            .sum()
    }
}

/// 3×3 zero-padded convolution plus bias over `in × h × w` planes.
fn conv_forward(layer: &ConvLayer, input: &[f64], w: usize, h: usize) -> Vec<f64> {
    let plane = w * h;
    let mut out = vec![0.0; layer.out_channels * plane];
    for o in 0..layer.out_channels {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.iter_mut().for_each(|v| *v = layer.bias[o]);
        for i in 0..layer.in_channels {
            let src = &input[i * plane..(i + 1) * plane];
            let k = layer.kernel(o, i);
            for (tap, &wt) in k.iter().enumerate() {
                if wt == 0.0 {
                    continue;
                }
                let (dy, dx) = (tap / 3, tap % 3);
                let (c_lo, c_hi) = (1usize.saturating_sub(dx), (w + 1 - dx).min(w));
                for r in 0..h {
                    let rr = r + dy;
                    if rr == 0 || rr > h {
                        continue;
                    }
                    let srow = &src[(rr - 1) * w..rr * w];
                    let drow = &mut dst[r * w..(r + 1) * w];
                    for c in c_lo..c_hi {
                        drow[c] += wt * srow[c + dx - 1];
                    }
                }
            }
        }
    }
    out
}

/// Batch-norm and ReLU. Returns (pre-ReLU values, activations).
fn activate(layer: &ConvLayer, z: &[f64], plane: usize) -> (Vec<f64>, Vec<f64>) {
    let mut u = z.to_vec();
    if let Some(bn) = &layer.batchnorm {
        for c in 0..layer.out_channels {
            let (m, s, t, inv) = (bn.mean[c], bn.scale[c], bn.shift[c], bn.inv_std(c));
            u[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = (*v - m) * inv * s + t);
        }
    }
    let a = if layer.relu { u.iter().map(|&v| v.max(0.0)).collect() } else { u.clone() };
    (u, a)
}

/// Gradient of the loss with respect to every trainable parameter, laid out
/// like [`ResidualNet::params_mut`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

struct LayerCache {
    input: Vec<f64>,
    z: Vec<f64>,
    u: Vec<f64>,
}

/// Accumulates `∂L/∂θ` for one image given `∂L/∂R`.
fn backward(net: &ResidualNet, caches: &[LayerCache], d_out: Vec<f64>, w: usize, h: usize, grad: &mut [Vec<f64>]) {
    let plane = w * h;
    let mut d_act = d_out;
    for (li, layer) in net.layers.iter().enumerate().rev() {
        let cache = &caches[li];
        let g = &mut grad[li];
        let mut du = d_act;
        if layer.relu {
            du.iter_mut().zip(&cache.u).for_each(|(d, &u)| {
                if u <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        let nk = layer.kernels.len();
        let nb = layer.bias.len();
        let mut dz = du;
        if let Some(bn) = &layer.batchnorm {
            let n = layer.out_channels;
            for c in 0..n {
                let inv = bn.inv_std(c);
                let (mut ds, mut dt) = (0.0, 0.0);
                for p in c * plane..(c + 1) * plane {
                    ds += dz[p] * (cache.z[p] - bn.mean[c]) * inv;
                    dt += dz[p];
                    dz[p] *= bn.scale[c] * inv;
                }
                g[nk + nb + c] += ds;
                g[nk + nb + n + c] += dt;
            }
        }
        for o in 0..layer.out_channels {
            g[nk + o] += dz[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
        let mut d_in = if li > 0 { vec![0.0; layer.in_channels * plane] } else { Vec::new() };
        for o in 0..layer.out_channels {
            let dzo = &dz[o * plane..(o + 1) * plane];
            for i in 0..layer.in_channels {
                let src = &cache.input[i * plane..(i + 1) * plane];
                let kbase = (o * layer.in_channels + i) * TAPS;
                for tap in 0..TAPS {
                    let (dy, dx) = (tap / 3, tap % 3);
                    let (c_lo, c_hi) = (1usize.saturating_sub(dx), (w + 1 - dx).min(w));
                    let wt = layer.kernels[kbase + tap];
                    let mut acc = 0.0;
                    for r in 0..h {
                        let rr = r + dy;
                        if rr == 0 || rr > h {
                            continue;
                        }
                        let srow = &src[(rr - 1) * w..rr * w];
                        let drow = &dzo[r * w..(r + 1) * w];
                        for c in c_lo..c_hi {
                            acc += drow[c] * srow[c + dx - 1];
                        }
                        if li > 0 && wt != 0.0 {
                            let irow = &mut d_in[i * plane + (rr - 1) * w..i * plane + rr * w];
                            for c in c_lo..c_hi {
                                irow[c + dx - 1] += wt * drow[c];
                            }
                        }
                    }
                    g[kbase + tap] += acc;
                }
            }
        }
        d_act = d_in;
    }
}

fn check_pairs(pairs: &[(RealImage, RealImage)]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidParameter("loss needs at least one pair".into()));
    }
    for (k, (noisy, clean)) in pairs.iter().enumerate() {
        if (noisy.width, noisy.height) != (clean.width, clean.height) {
            return Err(Error::DimensionMismatch(format!(
                "pair {k}: noisy {}x{} vs clean {}x{}",
                noisy.width, noisy.height, clean.width, clean.height
            )));
        }
    }
    Ok(())
}

/// Residual-learning objective `1/(2N) Σ ‖R(y_i) − (y_i − x_i)‖²_F` over
/// `(noisy y, clean x)` pairs.
pub fn loss(net: &ResidualNet, pairs: &[(RealImage, RealImage)]) -> Result<f64> {
    check_pairs(pairs)?;
    let mut total = 0.0;
    for (noisy, clean) in pairs {
        let r = net.residual(noisy);
        total += r
            .data
            .iter()
            .zip(noisy.data.iter().zip(&clean.data))
            .map(|(&rv, (&y, &x))| (rv - (y - x)).powi(2))
            .sum::<f64>();
    }
    Ok(total / (2.0 * pairs.len() as f64))
}

/// Loss and its gradient.
pub fn loss_and_gradient(net: &ResidualNet, pairs: &[(RealImage, RealImage)]) -> Result<(f64, Gradients)> {
    check_pairs(pairs)?;
    let n = pairs.len() as f64;
    let mut grad: Vec<Vec<f64>> = net
        .layers
        .iter()
        .map(|l| vec![0.0; l.kernels.len() + l.bias.len() + l.batchnorm.as_ref().map_or(0, |b| 2 * b.scale.len())])
        .collect();
    let mut total = 0.0;
    for (noisy, clean) in pairs {
        let (w, h) = (noisy.width, noisy.height);
        let mut caches = Vec::with_capacity(net.layers.len());
        let mut act = noisy.data.clone();
        for layer in &net.layers {
            let z = conv_forward(layer, &act, w, h);
            let (u, a) = activate(layer, &z, w * h);
            caches.push(LayerCache { input: act, z, u });
            act = a;
        }
        let diff: Vec<f64> = act
            .iter()
            .zip(noisy.data.iter().zip(&clean.data))
            .map(|(&rv, (&y, &x))| rv - (y - x))
            .collect();
        total += diff.iter().map(|d| d * d).sum::<f64>();
        let d_out = diff.iter().map(|d| d / n).collect();
        backward(net, &caches, d_out, w, h, &mut grad);
    }
    Ok((total / (2.0 * n), Gradients { values: grad.into_iter().flatten().collect() }))
}

/// Denoises an 8-bit image: `clamp(y − R(y))` on the `[0, 1]` scale.
pub fn infer(net: &ResidualNet, img: &GrayImage) -> Result<GrayImage> {
    net.validate()?;
    let y = scaled(img);
    let r = net.residual(&y);
    let data = y.data.iter().zip(&r.data).map(|(&yv, &rv)| quantize_pixel((yv - rv).clamp(0.0, 1.0) * 255.0)).collect();
    GrayImage::new(img.width(), img.height(), data)
}

fn scaled(img: &GrayImage) -> RealImage {
    RealImage { width: img.width(), height: img.height(), data: img.data().iter().map(|&v| f64::from(v) / 255.0).collect() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Training noise level in 8-bit intensity units.
    pub noise_sigma: f64,
    pub patch_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub depth: usize,
    pub channels: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 25.0,
            patch_size: 40,
            epochs: 100,
            batch_size: 8,
            learning_rate: 0.5,
            momentum: 0.9,
            depth: 7,
            channels: 16,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma > 0.0) {
            return Err(Error::InvalidParameter("noise_sigma must be positive".into()));
        }
        if self.patch_size < 8 {
            return Err(Error::InvalidParameter("patch_size must be at least 8".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Cuts a random `size × size` window out of `img`.
pub fn random_patch(img: &GrayImage, size: usize, rng: &mut impl Rng) -> GrayImage {
    let r0 = rng.random_range(0..=img.height() - size);
    let c0 = rng.random_range(0..=img.width() - size);
    GrayImage::from_fn(size, size, |r, c| img.get(r0 + r, c0 + c))
}

/// Adds Gaussian noise of `sigma` intensity units to a `[0, 1]`-scaled image,
/// clipped to the representable range as an 8-bit acquisition would be.
pub fn add_noise(clean: &RealImage, sigma: f64, rng: &mut impl Rng) -> RealImage {
    let normal = Normal::new(0.0, sigma / 255.0).expect("positive sigma");
    RealImage {
        width: clean.width,
        height: clean.height,
        data: clean.data.iter().map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0)).collect(),
    }
}

/// Mini-batch SGD with momentum on the residual objective. Each epoch draws a
/// fresh random crop and fresh noise for every clean image.
pub fn train(cfg: &TrainConfig, clean: &[GrayImage]) -> Result<ResidualNet> {
    train_observed(cfg, clean, |_, _| {})
}

/// [`train`] with a per-epoch callback receiving `(epoch, mean batch loss)`.
pub fn train_observed(
    cfg: &TrainConfig,
    clean: &[GrayImage],
    mut observe: impl FnMut(usize, f64),
) -> Result<ResidualNet> {
    cfg.validate()?;
    if clean.is_empty() {
        return Err(Error::InvalidParameter("no training images".into()));
    }
    if let Some(small) = clean.iter().find(|g| g.width() < cfg.patch_size || g.height() < cfg.patch_size) {
        return Err(Error::InvalidParameter(format!(
            "training image {}x{} smaller than patch size {}",
            small.width(),
            small.height(),
            cfg.patch_size
        )));
    }
    let mut net = ResidualNet::dncnn(cfg.depth, cfg.channels, cfg.rng_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x5eed_0f_d0e5);
    let mut velocity = vec![0.0; net.parameter_count()];
    let mut order: Vec<usize> = (0..clean.len()).collect();
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let pairs: Vec<(RealImage, RealImage)> = chunk
                .iter()
                .map(|&k| {
                    let x = scaled(&random_patch(&clean[k], cfg.patch_size, &mut rng));
                    (add_noise(&x, cfg.noise_sigma, &mut rng), x)
                })
                .collect();
            let (l, g) = loss_and_gradient(&net, &pairs)?;
            // normalize by pixel count so the step size is patch-size independent
            let scale = 1.0 / (cfg.patch_size * cfg.patch_size) as f64;
            for ((p, v), d) in net.params_mut().zip(velocity.iter_mut()).zip(&g.values) {
                *v = cfg.momentum * *v - cfg.learning_rate * d * scale;
                *p += *v;
            }
            epoch_loss += l;
            batches += 1;
        }
        observe(epoch, epoch_loss / batches as f64);
    }
    Ok(net)
}

/// Peak signal-to-noise ratio in dB between two 8-bit images.
pub fn psnr(reference: &GrayImage, test: &GrayImage) -> f64 {
    assert_eq!(reference.dims(), test.dims(), "psnr needs equal dimensions");
    let mse = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum::<f64>()
        / reference.data().len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    }
}

/// Normalized Gaussian taps for offsets `−⌈3σ⌉..=⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius).map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur, kernel truncated at 3σ, replicated borders.
pub fn gaussian_fallback(img: &GrayImage, sigma: f64) -> Result<GrayImage> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma {sigma} must be positive")));
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let (w, h) = img.dims();
    let src = img.to_real();
    let mut rows = RealImage::zeros(w, h);
    for r in 0..h {
        for c in 0..w {
            rows.data[r * w + c] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| {
                    let cc = (c as isize + t as isize - radius).clamp(0, w as isize - 1) as usize;
                    kv * src.data[r * w + cc]
                })
                .sum();
        }
    }
    let mut out = RealImage::zeros(w, h);
    for r in 0..h {
        for c in 0..w {
            out.data[r * w + c] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| {
                    let rr = (r as isize + t as isize - radius).clamp(0, h as isize - 1) as usize;
                    kv * rows.data[rr * w + c]
                })
                .sum();
        }
    }
    Ok(out.quantize())
}

/// Serializes a network to the weight-file format.
pub fn save_weights(net: &ResidualNet) -> Vec<u8> {
    let mut header = String::new();
    for l in &net.layers {
        header.push_str(&format!("{} {}", l.out_channels, l.in_channels));
        if l.relu {
            header.push_str(" relu");
        }
        if l.batchnorm.is_some() {
            header.push_str(" bn");
        }
        header.push('\n');
    }
    header.push('\n');
    let mut out = header.into_bytes();
    let mut put = |vals: &[f64]| {
        for &v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    for l in &net.layers {
        put(&l.kernels);
        put(&l.bias);
        if let Some(bn) = &l.batchnorm {
            put(&bn.scale);
            put(&bn.shift);
            put(&bn.mean);
            put(&bn.var);
        }
    }
    out
}

/// Parses the weight-file format.
pub fn load_weights(bytes: &[u8]) -> Result<ResidualNet> {
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::ModelShape("weight header is not terminated by a blank line".into()))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::ModelShape("weight header is not text".into()))?;
    let mut body = &bytes[split + 2..];
    let mut take = |n: usize| -> Result<Vec<f64>> {
        if body.len() < 4 * n {
            return Err(Error::ModelShape("weight stream truncated".into()));
        }
        let vals = body[..4 * n]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        body = &body[4 * n..];
        Ok(vals)
    };
    let mut layers = Vec::new();
    for (k, line) in header.lines().enumerate() {
        let mut tokens = line.split_whitespace();
        let mut dim = |what: &str| -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::ModelShape(format!("layer {k}: bad {what} in `{line}`")))
        };
        let out_channels = dim("out_ch")?;
        let in_channels = dim("in_ch")?;
        let (mut relu, mut bn) = (false, false);
        for flag in tokens {
            match flag {
                "relu" => relu = true,
                "bn" => bn = true,
                other => return Err(Error::ModelShape(format!("layer {k}: unknown flag `{other}`"))),
            }
        }
        let kernels = take(out_channels * in_channels * TAPS)?;
        let bias = take(out_channels)?;
        let batchnorm = if bn {
            Some(BatchNorm {
                scale: take(out_channels)?,
                shift: take(out_channels)?,
                mean: take(out_channels)?,
                var: take(out_channels)?,
            })
        } else {
            None
        };
        layers.push(ConvLayer { in_channels, out_channels, kernels, bias, relu, batchnorm });
    }
    if !body.is_empty() {
        return Err(Error::ModelShape(format!("{} trailing bytes after the last layer", body.len())));
    }
    ResidualNet::new(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_net(seed: u64, channels: usize) -> ResidualNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = vec![
            ConvLayer::zeros(1, channels, true, true),
            ConvLayer::zeros(channels, channels, true, true),
            ConvLayer::zeros(channels, 1, false, false),
        ];
        for l in &mut layers {
            l.kernels.iter_mut().for_each(|w| *w = rng.random_range(-0.5..0.5));
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
            if let Some(bn) = &mut l.batchnorm {
                bn.scale.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
                bn.shift.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
                bn.mean.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
                bn.var.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
            }
        }
        ResidualNet::new(layers).unwrap()
    }

    fn random_real(w: usize, h: usize, rng: &mut impl Rng) -> RealImage {
        RealImage { width: w, height: h, data: (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect() }
    }

    /// Straight nested-loop convolution, independent of `conv_forward`.
    fn naive_forward(net: &ResidualNet, img: &RealImage) -> Vec<f64> {
        let (w, h) = (img.width as isize, img.height as isize);
        let mut act: Vec<Vec<f64>> = vec![img.data.clone()];
        for l in net.layers() {
            let mut next = Vec::new();
            for o in 0..l.out_channels {
                let mut plane = vec![0.0; (w * h) as usize];
                for r in 0..h {
                    for c in 0..w {
                        let mut s = l.bias[o];
                        for i in 0..l.in_channels {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (rr, cc) = (r + ky - 1, c + kx - 1);
                                    if rr < 0 || cc < 0 || rr >= h || cc >= w {
                                        continue;
                                    }
                                    let wt = l.kernels[((o * l.in_channels + i) * 3 + ky as usize) * 3 + kx as usize];
                                    s += wt * act[i][(rr * w + cc) as usize];
                                }
                            }
                        }
                        if let Some(bn) = &l.batchnorm {
                            s = (s - bn.mean[o]) / (bn.var[o] + 1e-5).sqrt() * bn.scale[o] + bn.shift[o];
                        }
                        if l.relu && s < 0.0 {
                            s = 0.0;
                        }
                        plane[(r * w + c) as usize] = s;
                    }
                }
                next.push(plane);
            }
            act = next;
        }
        act.remove(0)
    }

    #[test]
    fn zero_net_is_identity() {
        let net = ResidualNet::new(vec![
            ConvLayer::zeros(1, 4, true, false),
            ConvLayer::zeros(4, 4, true, true),
            ConvLayer::zeros(4, 1, false, false),
        ])
        .unwrap();
        let img = GrayImage::from_fn(9, 7, |r, c| (r * 29 + c * 13) as u8);
        assert_eq!(infer(&net, &img).unwrap(), img);
    }

    #[test]
    fn identity_kernel_removes_everything() {
        let mut layers = vec![
            ConvLayer::zeros(1, 1, false, false),
            ConvLayer::zeros(1, 1, false, false),
            ConvLayer::zeros(1, 1, false, false),
        ];
        for l in &mut layers {
            l.kernels[4] = 1.0;
        }
        let net = ResidualNet::new(layers).unwrap();
        let img = GrayImage::from_fn(6, 6, |r, c| (r * 40 + c) as u8);
        assert!(infer(&net, &img).unwrap().data().iter().all(|&v| v == 0));
    }

    #[test]
    fn forward_matches_nested_loop_oracle() {
        let net = random_net(7, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = random_real(8, 8, &mut rng);
        let fast = net.residual(&img);
        let slow = naive_forward(&net, &img);
        for (a, b) in fast.data.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn identity_batchnorm_is_transparent() {
        let mut with_bn = random_net(3, 2);
        let mut without = with_bn.clone();
        for l in &mut with_bn.layers {
            if l.batchnorm.is_some() {
                l.batchnorm = Some(BatchNorm::identity(l.out_channels));
            }
        }
        for l in &mut without.layers {
            l.batchnorm = None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_real(6, 5, &mut rng);
        let a = with_bn.residual(&img);
        let b = without.residual(&img);
        for (x, y) in a.data.iter().zip(&b.data) {
            // eps = 1e-5 in the denominator is the only difference
            assert!((x - y).abs() < 1e-4 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn shape_errors() {
        let bad = ResidualNet::new(vec![
            ConvLayer::zeros(1, 4, true, false),
            ConvLayer::zeros(3, 4, true, false),
            ConvLayer::zeros(4, 1, false, false),
        ]);
        assert!(matches!(bad, Err(Error::ModelShape(_))));
        let shallow = ResidualNet::new(vec![ConvLayer::zeros(1, 1, false, false), ConvLayer::zeros(1, 1, false, false)]);
        assert!(matches!(shallow, Err(Error::ModelShape(_))));
    }

    #[test]
    fn loss_examples() {
        let net = ResidualNet::new(vec![
            ConvLayer::zeros(1, 2, true, false),
            ConvLayer::zeros(2, 2, true, false),
            ConvLayer::zeros(2, 1, false, false),
        ])
        .unwrap();
        let clean = RealImage::zeros(4, 4);
        let mut noisy = clean.clone();
        for k in 0..8 {
            noisy.data[k] = 1.0;
        }
        let pairs = vec![(noisy.clone(), clean.clone())];
        assert_eq!(loss(&net, &pairs).unwrap(), 4.0);
        let doubled = vec![(noisy.clone(), clean.clone()), (noisy, clean)];
        assert_eq!(loss(&net, &doubled).unwrap(), 4.0);
    }

    #[test]
    fn loss_of_perfect_fit_is_zero() {
        // identity net predicts R(y) = y, which equals y - x for a zero clean image
        let mut layers = vec![
            ConvLayer::zeros(1, 1, false, false),
            ConvLayer::zeros(1, 1, false, false),
            ConvLayer::zeros(1, 1, false, false),
        ];
        for l in &mut layers {
            l.kernels[4] = 1.0;
        }
        let net = ResidualNet::new(layers).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noisy = random_real(5, 5, &mut rng);
        assert_eq!(loss(&net, &[(noisy, RealImage::zeros(5, 5))]).unwrap(), 0.0);
    }

    #[test]
    fn loss_rejects_mismatched_pairs() {
        let net = random_net(1, 2);
        let r = loss(&net, &[(RealImage::zeros(4, 4), RealImage::zeros(4, 5))]);
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
        assert!(loss(&net, &[]).is_err());
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let net = random_net(42, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let clean = random_real(8, 8, &mut rng);
        let noisy = add_noise(&clean, 25.0, &mut rng);
        let pairs = vec![(noisy, clean)];
        let (_, g) = loss_and_gradient(&net, &pairs).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for k in 0..g.values.len() {
            let mut plus = net.clone();
            *plus.params_mut().nth(k).unwrap() += h;
            let mut minus = net.clone();
            *minus.params_mut().nth(k).unwrap() -= h;
            let fd = (loss(&plus, &pairs).unwrap() - loss(&minus, &pairs).unwrap()) / (2.0 * h);
            let a = g.values[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = TrainConfig { epochs: 0, depth: 3, channels: 4, patch_size: 8, ..Default::default() };
        let imgs = vec![GrayImage::filled(16, 16, 100)];
        let net = train(&cfg, &imgs).unwrap();
        assert_eq!(net, ResidualNet::dncnn(3, 4, cfg.rng_seed).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig { epochs: 2, depth: 3, channels: 3, patch_size: 8, batch_size: 2, ..Default::default() };
        let imgs: Vec<GrayImage> = (0..3).map(|k| GrayImage::from_fn(12, 12, |r, c| ((r + k) * 20 + c) as u8)).collect();
        assert_eq!(train(&cfg, &imgs).unwrap(), train(&cfg, &imgs).unwrap());
    }

    #[test]
    fn weight_file_round_trip() {
        let net = random_net(9, 3);
        let bytes = save_weights(&net);
        let text_end = bytes.windows(2).position(|w| w == b"\n\n").unwrap();
        assert_eq!(&bytes[..text_end], b"3 1 relu bn\n3 3 relu bn\n1 3");
        let loaded = load_weights(&bytes).unwrap();
        for (a, b) in loaded.layers().iter().zip(net.layers()) {
            for (x, y) in a.kernels.iter().zip(&b.kernels) {
                assert_eq!(*x, f64::from(*y as f32));
            }
        }
        // f32 storage is a fixed point
        assert_eq!(save_weights(&loaded), bytes);
        assert!(load_weights(&bytes[..bytes.len() - 1]).is_err());
        assert!(load_weights(b"1 1 relu\n1 1\n").is_err());
    }

    #[test]
    fn gaussian_fallback_flat_and_impulse() {
        let flat = GrayImage::filled(9, 9, 123);
        assert_eq!(gaussian_fallback(&flat, 1.3).unwrap(), flat);
        let impulse = GrayImage::from_fn(7, 7, |r, c| if r == 3 && c == 3 { 255 } else { 0 });
        let out = gaussian_fallback(&impulse, 1.0).unwrap();
        // normalized taps of exp(-x^2/2) for |x| <= 3
        let taps = [0.004_433_048_2, 0.054_005_582_7, 0.242_036_229_2, 0.399_050_279_8];
        let tap = |d: usize| taps[3 - d];
        for r in 0..7usize {
            for c in 0..7usize {
                let expect: f64 = 255.0 * tap(r.abs_diff(3)) * tap(c.abs_diff(3));
                assert_eq!(out.get(r, c), (expect + 0.5).floor() as u8, "({r},{c})");
                assert_eq!(out.get(r, c), out.get(c, r));
                assert_eq!(out.get(r, c), out.get(6 - r, 6 - c));
            }
        }
        assert!((gaussian_kernel(1.0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // 49 independently rounded pixels: the real-valued sum is exactly 255
        let sum: i32 = out.data().iter().map(|&v| i32::from(v)).sum();
        assert_eq!(sum, 249);
        assert!(gaussian_fallback(&flat, 0.0).is_err());
    }

    #[test]
    fn psnr_definition() {
        let a = GrayImage::filled(4, 4, 100);
        let b = GrayImage::filled(4, 4, 110);
        assert!((psnr(&a, &b) - 10.0 * (65025.0f64 / 100.0).log10()).abs() < 1e-12);
        assert!(psnr(&a, &a).is_infinite());
    }
}
