//! Runs the enhancement cascade on a synthetic phantom and writes every stage
//! as a numbered PGM.
//!
//! ```text
//! cargo run --example preprocess -- out/preprocess
//! ```

use std::path::PathBuf;

use biliscope::phantom::{generate, PhantomSpec};
use biliscope::pipeline::{write_intermediates, Pipeline, PipelineConfig};

fn main() -> biliscope::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/preprocess".into()));
    let phantom = generate(&PhantomSpec { duct_width_px: 24.0, rng_seed: 7, ..Default::default() })?;
    let pipeline = Pipeline::new(PipelineConfig::default())?;
    let result = pipeline.run_image("phantom", &biliscope::raster::AnyImage::Gray(phantom.image));
    for path in write_intermediates(&result, &out)? {
        println!("{}", path.display());
    }
    Ok(())
}
