//! Writes a balanced phantom corpus with its manifest.
//!
//! ```text
//! cargo run --example phantom_corpus -- out/corpus
//! ```

use std::path::PathBuf;

use biliscope::phantom::{generate_corpus, read_manifest, write_corpus, PhantomSpec};

fn main() -> biliscope::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/corpus".into()));
    let corpus = generate_corpus(10, &PhantomSpec::default(), 0)?;
    let manifest = write_corpus(&out, &corpus)?;
    for e in read_manifest(&manifest)? {
        println!("{:<12} {:<8} {:>5.1} px", e.id, e.label, e.duct_width_px);
    }
    Ok(())
}
