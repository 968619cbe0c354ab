//! Trains a small residual denoiser on clean phantoms and reports the PSNR
//! gain on a held-out noisy phantom.

use biliscope::denoiser::{add_noise, infer, psnr, train_observed, TrainConfig};
use biliscope::phantom::{generate, PhantomSpec};
use biliscope::raster::{GrayImage, RealImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> biliscope::Result<()> {
    let clean = |seed: u64| {
        generate(&PhantomSpec { size: 128, duct_width_px: 6.0 + seed as f64 * 2.0, noise_sigma: 0.0, haze_strength: 0.0, rng_seed: seed, ..Default::default() })
            .map(|p| p.image)
    };
    let training: Vec<GrayImage> = (0..8).map(clean).collect::<biliscope::Result<_>>()?;
    let cfg = TrainConfig { epochs: 40, ..Default::default() };
    let net = train_observed(&cfg, &training, |epoch, loss| {
        if epoch % 10 == 0 {
            println!("epoch {epoch:>3}  loss {loss:.5}");
        }
    })?;

    let truth = clean(42)?;
    let x = RealImage { width: 128, height: 128, data: truth.data().iter().map(|&v| f64::from(v) / 255.0).collect() };
    let y = add_noise(&x, cfg.noise_sigma, &mut ChaCha8Rng::seed_from_u64(5));
    let noisy = GrayImage::new(128, 128, y.data.iter().map(|v| (v * 255.0).round() as u8).collect())?;
    let denoised = infer(&net, &noisy)?;
    println!("psnr noisy {:.2} dB, denoised {:.2} dB", psnr(&truth, &noisy), psnr(&truth, &denoised));
    Ok(())
}
