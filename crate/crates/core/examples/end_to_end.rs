//! The full phantom study: denoiser training, a 50 + 50 corpus, feature
//! extraction and ten-fold cross-validation. Takes several minutes.

use std::path::Path;

use biliscope::features::FEATURE_NAMES;
use biliscope::phantom::{generate_corpus_with, write_corpus, CorpusSpec};
use biliscope::pipeline::{build_dataset_with, evaluate_all, train_denoiser, Pipeline, PipelineConfig};

fn main() -> biliscope::Result<()> {
    let cfg = PipelineConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/phantom_study.conf"))?;
    let net = train_denoiser(&cfg)?;
    let corpus = generate_corpus_with(&CorpusSpec::new(50, cfg.phantom, cfg.rng_seed + 1))?;
    let dir = std::env::temp_dir().join("biliscope-end-to-end");
    let manifest = write_corpus(&dir, &corpus)?;
    let dataset = build_dataset_with(&Pipeline::new(cfg.clone())?.with_denoiser(net), &manifest)?;
    let report = evaluate_all(&cfg, &dataset.rows)?;
    for m in &report.models {
        println!("{:<4} accuracy {:.3}  auc {:.3}", m.model, m.accuracy, m.auc);
    }
    for (i, name) in FEATURE_NAMES.iter().enumerate() {
        let mean = |dilated: bool| {
            let v: Vec<f64> = dataset
                .rows
                .iter()
                .zip(&dataset.raw)
                .filter(|(r, _)| !r.degenerate && r.label.is_dilated() == dilated)
                .filter_map(|(_, f)| f.map(|f| f.to_array()[i]))
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        println!("{name:>5}  normal {:>10.4}  dilated {:>10.4}", mean(false), mean(true));
    }
    Ok(())
}
