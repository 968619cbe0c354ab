//! Extracts the ten measurements from ground-truth masks of a normal and a
//! dilated phantom.

use biliscope::features::{bile_duct_of, connected_components, extract, FEATURE_NAMES};
use biliscope::phantom::{generate, PhantomSpec};

fn main() -> biliscope::Result<()> {
    println!("{:>6} {:>12} {:>12}", "", "normal", "dilated");
    let mut columns = Vec::new();
    for width in [8.0, 26.0] {
        let p = generate(&PhantomSpec { duct_width_px: width, rng_seed: 4, ..Default::default() })?;
        let blobs = connected_components(&p.tree_mask);
        let duct = bile_duct_of(&blobs)?;
        columns.push(extract(&p.image, &p.tree_mask, duct)?.features.to_array());
    }
    for (i, name) in FEATURE_NAMES.iter().enumerate() {
        println!("{name:>6} {:>12.4} {:>12.4}", columns[0][i], columns[1][i]);
    }
    Ok(())
}
