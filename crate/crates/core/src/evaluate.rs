//! Confusion metrics, ROC/AUC and stratified k-fold cross-validation.

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{predict_score, train, Label, LabeledDataset, ModelSpec};
use crate::error::{Error, Result};
use crate::features::{apply_scaler, fit_scaler};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn record(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Dilated, Label::Dilated) => self.tp += 1,
            (Label::Normal, Label::Normal) => self.tn += 1,
            (Label::Normal, Label::Dilated) => self.fp += 1,
            (Label::Dilated, Label::Normal) => self.fn_ += 1,
        }
    }

    pub fn from_pairs(truth: &[Label], predicted: &[Label]) -> Self {
        let mut c = Self::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            c.record(t, p);
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sensitivity: f64,
    pub precision: f64,
    pub specificity: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Names of the metrics whose quotient was 0/0 and reported as 0.
    pub degenerate: Vec<String>,
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let mut degenerate = Vec::new();
    let mut ratio = |name: &str, num: f64, den: f64| {
        if den == 0.0 {
            degenerate.push(name.to_string());
            0.0
        } else {
            num / den
        }
    };
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let sensitivity = ratio("sensitivity", tp, tp + fn_);
    let precision = ratio("precision", tp, tp + fp);
    let specificity = ratio("specificity", tn, tn + fp);
    let f1 = ratio("f1", 2.0 * sensitivity * precision, sensitivity + precision);
    let accuracy = ratio("accuracy", tp + tn, tp + tn + fp + fn_);
    Metrics { sensitivity, precision, specificity, f1, accuracy, degenerate }
}

/// One operating point; `threshold` is `None` for the origin, where nothing
/// is called dilated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: Option<f64>,
    pub fpr: f64,
    pub tpr: f64,
}

/// Sweeps every distinct score as a `score ≥ t ⇒ dilated` threshold and
/// integrates the curve with the trapezoid rule.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<(f64, Vec<RocPoint>)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|l| l.is_dilated()).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidParameter("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { threshold: None, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]].is_dilated() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let p = RocPoint { threshold: Some(t), fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 };
        let prev = points.last().expect("origin present");
        auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
        points.push(p);
    }
    Ok((auc, points))
}

/// Fold index per row. Rows of each class are shuffled, then dealt to folds
/// round-robin, the counter running on from one class into the next.
pub fn stratified_folds(labels: &[Label], folds: usize, rng_seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Stratification(format!("need at least 2 folds, got {folds}")));
    }
    let leave_one_out = folds == labels.len();
    for class in [Label::Dilated, Label::Normal] {
        let n = labels.iter().filter(|&&l| l == class).count();
        if n < folds && !leave_one_out {
            return Err(Error::Stratification(format!("{n} {class} rows cannot fill {folds} folds")));
        }
    }
    if labels.len() < folds {
        return Err(Error::Stratification(format!("{} rows cannot fill {folds} folds", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut assignment = vec![0; labels.len()];
    let mut position = 0;
    for class in [Label::Dilated, Label::Normal] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = position % folds;
            position += 1;
        }
    }
    Ok(assignment)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub folds: usize,
    pub rng_seed: u64,
    /// Refit the min-max scaler on each training split.
    pub per_fold_scaling: bool,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self { folds: 10, rng_seed: 0, per_fold_scaling: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    pub spec: ModelSpec,
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub precision: f64,
    pub f1: f64,
    pub specificity: f64,
    pub auc: f64,
    pub degenerate: Vec<String>,
    pub roc: Vec<RocPoint>,
    /// Out-of-fold dilated score per dataset row.
    pub scores: Vec<f64>,
}

impl ModelReport {
    pub fn metrics(&self) -> Metrics {
        Metrics {
            sensitivity: self.sensitivity,
            precision: self.precision,
            specificity: self.specificity,
            f1: self.f1,
            accuracy: self.accuracy,
            degenerate: self.degenerate.clone(),
        }
    }
}

/// Cross-validation results for a set of models over one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: usize,
    pub feature_names: Vec<String>,
    pub folds: usize,
    pub rng_seed: u64,
    pub per_fold_scaling: bool,
    /// Metrics come from confusion counts and scores pooled over all folds.
    pub pooling: String,
    pub models: Vec<ModelReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse { token: "report".into(), reason: e.to_string() })
    }
}

pub fn cross_validate(spec: &ModelSpec, data: &LabeledDataset, folds: usize, rng_seed: u64) -> Result<ModelReport> {
    cross_validate_with(spec, data, &CvOptions { folds, rng_seed, per_fold_scaling: false })
}

pub fn cross_validate_with(spec: &ModelSpec, data: &LabeledDataset, opts: &CvOptions) -> Result<ModelReport> {
    data.validate()?;
    let assignment = stratified_folds(&data.labels, opts.folds, opts.rng_seed)?;
    let per_fold: Vec<Vec<(usize, f64)>> = (0..opts.folds)
        .into_par_iter()
        .map(|f| {
            let train_idx: Vec<usize> = (0..data.len()).filter(|&i| assignment[i] != f).collect();
            let test_idx: Vec<usize> = (0..data.len()).filter(|&i| assignment[i] == f).collect();
            let mut train_set = data.subset(&train_idx);
            let mut test_rows: Vec<Vec<f64>> = test_idx.iter().map(|&i| data.rows[i].clone()).collect();
            if opts.per_fold_scaling {
                let s = fit_scaler(&train_set.rows)?;
                train_set.rows = train_set.rows.iter().map(|r| apply_scaler(&s, r)).collect::<Result<_>>()?;
                test_rows = test_rows.iter().map(|r| apply_scaler(&s, r)).collect::<Result<_>>()?;
            }
            let model = train(spec, &train_set)?;
            test_idx.iter().zip(&test_rows).map(|(&i, r)| Ok((i, predict_score(&model, r)?))).collect()
        })
        .collect::<Result<_>>()?;
    let mut scores = vec![0.0; data.len()];
    for (i, s) in per_fold.into_iter().flatten() {
        scores[i] = s;
    }
    let predicted: Vec<Label> = scores.iter().map(|&s| Label::from_score(s)).collect();
    let counts = ConfusionCounts::from_pairs(&data.labels, &predicted);
    let m = metrics(&counts);
    let (auc, roc) = roc_auc(&scores, &data.labels)?;
    Ok(ModelReport {
        model: spec.kind().name().to_string(),
        spec: *spec,
        counts,
        accuracy: m.accuracy,
        sensitivity: m.sensitivity,
        precision: m.precision,
        f1: m.f1,
        specificity: m.specificity,
        auc,
        degenerate: m.degenerate,
        roc,
        scores,
    })
}

pub fn evaluate_models(specs: &[ModelSpec], data: &LabeledDataset, opts: &CvOptions) -> Result<EvalReport> {
    let models = specs.iter().map(|s| cross_validate_with(s, data, opts)).collect::<Result<_>>()?;
    Ok(EvalReport {
        rows: data.len(),
        feature_names: data.feature_names.clone(),
        folds: opts.folds,
        rng_seed: opts.rng_seed,
        per_fold_scaling: opts.per_fold_scaling,
        pooling: "pooled".into(),
        models,
    })
}
