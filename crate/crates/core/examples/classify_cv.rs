//! Ten-fold cross-validation of all six classifiers on two Gaussian clouds.

use biliscope::classify::{Label, LabeledDataset, ModelSpec};
use biliscope::evaluate::{evaluate_models, CvOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> biliscope::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.12).expect("valid sigma");
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for k in 0..100 {
        let label = if k % 2 == 0 { Label::Dilated } else { Label::Normal };
        let center = if label.is_dilated() { 0.65 } else { 0.35 };
        rows.push((0..4).map(|_| center + noise.sample(&mut rng)).collect());
        labels.push(label);
    }
    let names = ["mja", "ar", "mia", "cmp"].map(String::from).to_vec();
    let data = LabeledDataset::new(rows, labels, names)?;
    let report = evaluate_models(&ModelSpec::default_suite(0), &data, &CvOptions::default())?;
    for m in &report.models {
        println!(
            "{:<4} acc {:.3}  sens {:.3}  spec {:.3}  f1 {:.3}  auc {:.3}",
            m.model, m.accuracy, m.sensitivity, m.specificity, m.f1, m.auc
        );
    }
    Ok(())
}
