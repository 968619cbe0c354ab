//! Segments a clean phantom with the default seed and compares the contour
//! with the ground-truth tree.

use biliscope::phantom::{generate, PhantomSpec};
use biliscope::segment::{default_seed, dice, run_observed, ChanVeseParams};

fn main() -> biliscope::Result<()> {
    for width in [6.0, 12.0, 20.0, 34.0] {
        let spec = PhantomSpec { duct_width_px: width, noise_sigma: 0.0, haze_strength: 0.0, rng_seed: 1, ..Default::default() };
        let phantom = generate(&spec)?;
        let (w, h) = phantom.image.dims();
        let seed = default_seed(w, h)?;
        let params = ChanVeseParams { snapshot_every: 125, ..Default::default() };
        let seg = run_observed(&phantom.image, &seed, &params, |_, _| {})?;
        let areas: Vec<usize> = seg.snapshots.iter().map(|m| m.count()).collect();
        println!(
            "width {width:>4} px  dice {:.3}  area {} px  growth {:?}",
            dice(&seg.mask, &phantom.tree_mask),
            seg.mask.count(),
            areas
        );
    }
    Ok(())
}
