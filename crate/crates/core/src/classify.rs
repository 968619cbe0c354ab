//! The six binary classifiers: k-nearest neighbors, RBF support vector
//! machine, logistic regression, decision tree, random forest and a
//! one-hidden-layer perceptron. Every model scores the probability of the
//! dilated class.

use std::fmt;
use std::io::{BufRead, Read, Write};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Dilated,
}

impl Label {
    pub fn name(&self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Dilated => "dilated",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Label::Normal),
            "dilated" => Ok(Label::Dilated),
            other => Err(Error::Parse { token: other.to_string(), reason: "label must be dilated or normal".into() }),
        }
    }

    pub fn is_dilated(&self) -> bool {
        *self == Label::Dilated
    }

    /// Dilated iff `score ≥ 0.5`.
    pub fn from_score(score: f64) -> Self {
        if score >= 0.5 {
            Label::Dilated
        } else {
            Label::Normal
        }
    }

    pub fn other(&self) -> Self {
        match self {
            Label::Normal => Label::Dilated,
            Label::Dilated => Label::Normal,
        }
    }

    fn target(&self) -> f64 {
        if self.is_dilated() {
            1.0
        } else {
            0.0
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
    pub feature_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<Label>, feature_names: Vec<String>) -> Result<Self> {
        let ds = Self { rows, labels, feature_names };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.len() != self.labels.len() {
            return Err(Error::DimensionMismatch(format!("{} rows but {} labels", self.rows.len(), self.labels.len())));
        }
        let d = self.dim();
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::DimensionMismatch(format!("row {i} has {} features, expected {d}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::DegenerateData(format!("row {i} has a non-finite feature")));
            }
        }
        if !self.feature_names.is_empty() && self.feature_names.len() != d {
            return Err(Error::DimensionMismatch(format!("{} feature names for {d} features", self.feature_names.len())));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(self.feature_names.len(), Vec::len)
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            feature_names: self.feature_names.clone(),
        }
    }

    fn require_both_classes(&self, kind: ModelKind) -> Result<()> {
        if self.len() < 2 || self.count(Label::Dilated) == 0 || self.count(Label::Normal) == 0 {
            return Err(Error::DegenerateData(format!("{kind} needs at least two rows covering both labels")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Knn,
    Svm,
    Lr,
    Dt,
    Rf,
    Mlp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [ModelKind::Knn, ModelKind::Svm, ModelKind::Lr, ModelKind::Dt, ModelKind::Rf, ModelKind::Mlp];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Knn => "knn",
            ModelKind::Svm => "svm",
            ModelKind::Lr => "lr",
            ModelKind::Dt => "dt",
            ModelKind::Rf => "rf",
            ModelKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse { token: s.to_string(), reason: "unknown model kind".into() })
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    /// RBF width; `None` means `1 / d`.
    pub gamma: Option<f64>,
    pub c: f64,
    pub tolerance: f64,
    pub max_passes: usize,
    pub rng_seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self { gamma: None, c: 1.0, tolerance: 1e-3, max_passes: 100, rng_seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrParams {
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for LrParams {
    fn default() -> Self {
        Self { learning_rate: 0.1, epochs: 5000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self { max_depth: 8, min_leaf: 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub trees: usize,
    pub tree: TreeParams,
    /// Draw `n` rows with replacement per tree.
    pub bootstrap: bool,
    /// Consider `⌊√d⌋` random features per split instead of all of them.
    pub feature_sampling: bool,
    pub rng_seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { trees: 100, tree: TreeParams::default(), bootstrap: true, feature_sampling: true, rng_seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub init_range: f64,
    pub rng_seed: u64,
}

impl Default for MlpParams {
    fn default() -> Self {
        Self { hidden: 10, learning_rate: 0.1, epochs: 2000, init_range: 0.5, rng_seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Knn { k: usize },
    Svm(SvmParams),
    Lr(LrParams),
    Dt(TreeParams),
    Rf(ForestParams),
    Mlp(MlpParams),
}

impl ModelSpec {
    pub fn default_for(kind: ModelKind, rng_seed: u64) -> Self {
        match kind {
            ModelKind::Knn => ModelSpec::Knn { k: 5 },
            ModelKind::Svm => ModelSpec::Svm(SvmParams { rng_seed, ..Default::default() }),
            ModelKind::Lr => ModelSpec::Lr(LrParams::default()),
            ModelKind::Dt => ModelSpec::Dt(TreeParams::default()),
            ModelKind::Rf => ModelSpec::Rf(ForestParams { rng_seed, ..Default::default() }),
            ModelKind::Mlp => ModelSpec::Mlp(MlpParams { rng_seed, ..Default::default() }),
        }
    }

    /// All six kinds with default hyperparameters.
    pub fn default_suite(rng_seed: u64) -> Vec<Self> {
        ModelKind::ALL.iter().map(|&k| Self::default_for(k, rng_seed)).collect()
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::Knn { .. } => ModelKind::Knn,
            ModelSpec::Svm(_) => ModelKind::Svm,
            ModelSpec::Lr(_) => ModelKind::Lr,
            ModelSpec::Dt(_) => ModelKind::Dt,
            ModelSpec::Rf(_) => ModelKind::Rf,
            ModelSpec::Mlp(_) => ModelKind::Mlp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(format!("{}: {what}", self.kind())));
        match self {
            ModelSpec::Knn { k } if *k == 0 => bad("k must be at least 1"),
            ModelSpec::Svm(p) if !(p.c > 0.0) || !(p.tolerance > 0.0) || p.gamma.is_some_and(|g| !(g > 0.0)) => {
                bad("C, tolerance and gamma must be positive")
            }
            ModelSpec::Lr(p) if !(p.learning_rate > 0.0) => bad("learning rate must be positive"),
            ModelSpec::Dt(t) if t.max_depth == 0 || t.min_leaf == 0 => bad("depth and leaf size must be at least 1"),
            ModelSpec::Rf(f) if f.trees == 0 || f.tree.max_depth == 0 || f.tree.min_leaf == 0 => {
                bad("trees, depth and leaf size must be at least 1")
            }
            ModelSpec::Mlp(m) if m.hidden == 0 || !(m.learning_rate > 0.0) || !(m.init_range > 0.0) => {
                bad("hidden size, learning rate and init range must be positive")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Leaf { score: f64 },
    /// Rows with `v[feature] ≤ threshold` go left.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    /// Node 0 is the root.
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn score(&self, v: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { score } => return score,
                Node::Split { feature, threshold, left, right } => at = if v[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, at: usize) -> usize {
            match t.nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(t, left).max(walk(t, right)),
            }
        }
        walk(self, 0)
    }
}

/// `d → hidden → 2` network with sigmoid hidden units and a softmax output
/// whose second neuron is the dilated class.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub inputs: usize,
    pub hidden: usize,
    /// `hidden × inputs`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `2 × hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Mlp {
    pub fn random(inputs: usize, hidden: usize, range: f64, rng: &mut impl Rng) -> Self {
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-range..=range)).collect::<Vec<_>>();
        let w1 = draw(hidden * inputs);
        let b1 = draw(hidden);
        let w2 = draw(2 * hidden);
        let b2 = draw(2);
        Self { inputs, hidden, w1, b1, w2, b2 }
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Parameters flattened as `w1, b1, w2, b2`.
    pub fn params(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let (a, rest) = p.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, d) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2.copy_from_slice(d);
    }

    fn hidden_activations(&self, x: &[f64]) -> Vec<f64> {
        (0..self.hidden)
            .map(|h| {
                let row = &self.w1[h * self.inputs..(h + 1) * self.inputs];
                sigmoid(self.b1[h] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            })
            .collect()
    }

    /// Softmax output `[p_normal, p_dilated]`.
    pub fn forward(&self, x: &[f64]) -> [f64; 2] {
        let a = self.hidden_activations(x);
        let z: [f64; 2] = std::array::from_fn(|o| {
            self.b2[o] + self.w2[o * self.hidden..(o + 1) * self.hidden].iter().zip(&a).map(|(w, v)| w * v).sum::<f64>()
        });
        let m = z[0].max(z[1]);
        let e = [(z[0] - m).exp(), (z[1] - m).exp()];
        let s = e[0] + e[1];
        [e[0] / s, e[1] / s]
    }

    /// Mean cross-entropy over the rows.
    pub fn loss(&self, rows: &[Vec<f64>], labels: &[Label]) -> f64 {
        rows.iter()
            .zip(labels)
            .map(|(x, l)| -self.forward(x)[usize::from(l.is_dilated())].max(1e-300).ln())
            .sum::<f64>()
            / rows.len() as f64
    }

    /// Gradient of [`Mlp::loss`] in [`Mlp::params`] order.
    pub fn gradient(&self, rows: &[Vec<f64>], labels: &[Label]) -> Vec<f64> {
        let (d, h) = (self.inputs, self.hidden);
        let mut gw1 = vec![0.0; h * d];
        let mut gb1 = vec![0.0; h];
        let mut gw2 = vec![0.0; 2 * h];
        let mut gb2 = vec![0.0; 2];
        let scale = 1.0 / rows.len() as f64;
        for (x, l) in rows.iter().zip(labels) {
            let a = self.hidden_activations(x);
            let p = self.forward(x);
            let y = usize::from(l.is_dilated());
            let dz2 = [p[0] - f64::from(u8::from(y == 0)), p[1] - f64::from(u8::from(y == 1))];
            for o in 0..2 {
                gb2[o] += scale * dz2[o];
                for j in 0..h {
                    gw2[o * h + j] += scale * dz2[o] * a[j];
                }
            }
            for j in 0..h {
                let da = dz2[0] * self.w2[j] + dz2[1] * self.w2[h + j];
                let dz1 = da * a[j] * (1.0 - a[j]);
                gb1[j] += scale * dz1;
                for k in 0..d {
                    gw1[j * d + k] += scale * dz1 * x[k];
                }
            }
        }
        [gw1, gb1, gw2, gb2].concat()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    Knn { k: usize, rows: Vec<Vec<f64>>, labels: Vec<Label> },
    Svm { gamma: f64, support: Vec<Vec<f64>>, coef: Vec<f64>, bias: f64 },
    Lr { weights: Vec<f64>, bias: f64 },
    Dt(Tree),
    Rf(Vec<Tree>),
    Mlp(Mlp),
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::Knn { .. } => ModelKind::Knn,
            TrainedModel::Svm { .. } => ModelKind::Svm,
            TrainedModel::Lr { .. } => ModelKind::Lr,
            TrainedModel::Dt(_) => ModelKind::Dt,
            TrainedModel::Rf(_) => ModelKind::Rf,
            TrainedModel::Mlp(_) => ModelKind::Mlp,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TrainedModel::Knn { rows, .. } => rows.first().map_or(0, Vec::len),
            TrainedModel::Svm { support, .. } => support.first().map_or(0, Vec::len),
            TrainedModel::Lr { weights, .. } => weights.len(),
            TrainedModel::Dt(t) => tree_dim(t),
            TrainedModel::Rf(ts) => ts.iter().map(tree_dim).max().unwrap_or(0),
            TrainedModel::Mlp(m) => m.inputs,
        }
    }
}

/// Trees record no input width; the largest split feature bounds it from below.
fn tree_dim(t: &Tree) -> usize {
    t.nodes
        .iter()
        .filter_map(|n| match n {
            Node::Split { feature, .. } => Some(feature + 1),
            Node::Leaf { .. } => None,
        })
        .max()
        .unwrap_or(0)
}

pub fn train(spec: &ModelSpec, data: &LabeledDataset) -> Result<TrainedModel> {
    spec.validate()?;
    data.validate()?;
    match spec {
        ModelSpec::Knn { k } => {
            if data.is_empty() {
                return Err(Error::DegenerateData("knn needs at least one row".into()));
            }
            Ok(TrainedModel::Knn { k: *k, rows: data.rows.clone(), labels: data.labels.clone() })
        }
        ModelSpec::Svm(p) => {
            data.require_both_classes(ModelKind::Svm)?;
            Ok(train_svm(p, data))
        }
        ModelSpec::Lr(p) => {
            data.require_both_classes(ModelKind::Lr)?;
            Ok(train_lr(p, data))
        }
        ModelSpec::Dt(t) => {
            data.require_both_classes(ModelKind::Dt)?;
            let all: Vec<usize> = (0..data.len()).collect();
            Ok(TrainedModel::Dt(grow_tree(data, &all, t, None)))
        }
        ModelSpec::Rf(f) => {
            data.require_both_classes(ModelKind::Rf)?;
            Ok(TrainedModel::Rf(train_forest(f, data)))
        }
        ModelSpec::Mlp(p) => {
            data.require_both_classes(ModelKind::Mlp)?;
            Ok(TrainedModel::Mlp(train_mlp(p, data)))
        }
    }
}

fn train_lr(p: &LrParams, data: &LabeledDataset) -> TrainedModel {
    let d = data.dim();
    let n = data.len() as f64;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..p.epochs {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, l) in data.rows.iter().zip(&data.labels) {
            let err = sigmoid(b + dot(&w, x)) - l.target();
            for k in 0..d {
                gw[k] += err * x[k];
            }
            gb += err;
        }
        for k in 0..d {
            w[k] -= p.learning_rate * gw[k] / n;
        }
        b -= p.learning_rate * gb / n;
    }
    TrainedModel::Lr { weights: w, bias: b }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    (-gamma * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).exp()
}

/// Simplified sequential minimal optimization over the full Gram matrix.
fn train_svm(p: &SvmParams, data: &LabeledDataset) -> TrainedModel {
    let n = data.len();
    let gamma = p.gamma.unwrap_or(1.0 / data.dim().max(1) as f64);
    let y: Vec<f64> = data.labels.iter().map(|l| if l.is_dilated() { 1.0 } else { -1.0 }).collect();
    let k: Vec<f64> = (0..n * n).map(|ij| rbf(gamma, &data.rows[ij / n], &data.rows[ij % n])).collect();
    let mut alpha = vec![0.0; n];
    let mut b = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(p.rng_seed);
    let f = |alpha: &[f64], b: f64, i: usize| b + (0..n).map(|j| alpha[j] * y[j] * k[j * n + i]).sum::<f64>();
    let mut passes = 0;
    let mut sweeps = 0;
    let sweep_cap = 100 * p.max_passes.max(1);
    while passes < p.max_passes && sweeps < sweep_cap {
        sweeps += 1;
        let mut changed = 0;
        for i in 0..n {
            let ei = f(&alpha, b, i) - y[i];
            if !((y[i] * ei < -p.tolerance && alpha[i] < p.c) || (y[i] * ei > p.tolerance && alpha[i] > 0.0)) {
                continue;
            }
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let ej = f(&alpha, b, j) - y[j];
            let (ai, aj) = (alpha[i], alpha[j]);
            let (lo, hi) = if y[i] != y[j] {
                ((aj - ai).max(0.0), (p.c + aj - ai).min(p.c))
            } else {
                ((ai + aj - p.c).max(0.0), (ai + aj).min(p.c))
            };
            if lo >= hi {
                continue;
            }
            let eta = 2.0 * k[i * n + j] - k[i * n + i] - k[j * n + j];
            if eta >= 0.0 {
                continue;
            }
            let new_aj = (aj - y[j] * (ei - ej) / eta).clamp(lo, hi);
            if (new_aj - aj).abs() < 1e-5 {
                continue;
            }
            let new_ai = ai + y[i] * y[j] * (aj - new_aj);
            let b1 = b - ei - y[i] * (new_ai - ai) * k[i * n + i] - y[j] * (new_aj - aj) * k[i * n + j];
            let b2 = b - ej - y[i] * (new_ai - ai) * k[i * n + j] - y[j] * (new_aj - aj) * k[j * n + j];
            b = if new_ai > 0.0 && new_ai < p.c {
                b1
            } else if new_aj > 0.0 && new_aj < p.c {
                b2
            } else {
                (b1 + b2) / 2.0
            };
            alpha[i] = new_ai;
            alpha[j] = new_aj;
            changed += 1;
        }
        passes = if changed == 0 { passes + 1 } else { 0 };
    }
    let keep: Vec<usize> = (0..n).filter(|&i| alpha[i] > 0.0).collect();
    TrainedModel::Svm {
        gamma,
        support: keep.iter().map(|&i| data.rows[i].clone()).collect(),
        coef: keep.iter().map(|&i| alpha[i] * y[i]).collect(),
        bias: b,
    }
}

fn gini(dilated: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let p = dilated as f64 / total as f64;
    2.0 * p * (1.0 - p)
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

fn best_split(data: &LabeledDataset, idx: &[usize], features: &[usize], min_leaf: usize) -> Option<BestSplit> {
    let n = idx.len();
    let total_dilated = idx.iter().filter(|&&i| data.labels[i].is_dilated()).count();
    let mut best: Option<BestSplit> = None;
    for &f in features {
        let mut order: Vec<usize> = idx.to_vec();
        order.sort_by(|&a, &b| data.rows[a][f].total_cmp(&data.rows[b][f]).then(a.cmp(&b)));
        let mut left_dilated = 0;
        for cut in 1..n {
            left_dilated += usize::from(data.labels[order[cut - 1]].is_dilated());
            let (lo, hi) = (data.rows[order[cut - 1]][f], data.rows[order[cut]][f]);
            if lo == hi || cut < min_leaf || n - cut < min_leaf {
                continue;
            }
            let impurity = (cut as f64 * gini(left_dilated, cut)
                + (n - cut) as f64 * gini(total_dilated - left_dilated, n - cut))
                / n as f64;
            if best.as_ref().is_none_or(|b| impurity < b.impurity) {
                best = Some(BestSplit { feature: f, threshold: lo + (hi - lo) / 2.0, impurity });
            }
        }
    }
    best
}

/// Gini tree; with `rng` set each split considers `⌊√d⌋` random features.
fn grow_tree(data: &LabeledDataset, idx: &[usize], p: &TreeParams, mut rng: Option<&mut ChaCha8Rng>) -> Tree {
    let mut tree = Tree { nodes: Vec::new() };
    let d = data.dim();
    let per_split = ((d as f64).sqrt().floor() as usize).max(1);
    // explicit stack of (node slot, rows, depth) keeps node order stable
    tree.nodes.push(Node::Leaf { score: 0.0 });
    let mut stack = vec![(0usize, idx.to_vec(), 0usize)];
    while let Some((slot, rows, depth)) = stack.pop() {
        let dilated = rows.iter().filter(|&&i| data.labels[i].is_dilated()).count();
        let score = dilated as f64 / rows.len() as f64;
        let pure = dilated == 0 || dilated == rows.len();
        let split = if pure || depth >= p.max_depth || rows.len() < 2 * p.min_leaf {
            None
        } else {
            let features: Vec<usize> = match rng.as_deref_mut() {
                Some(r) => {
                    let mut f = sample(r, d, per_split.min(d)).into_vec();
                    f.sort_unstable();
                    f
                }
                None => (0..d).collect(),
            };
            best_split(data, &rows, &features, p.min_leaf)
        };
        match split {
            None => tree.nodes[slot] = Node::Leaf { score },
            Some(s) => {
                let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| data.rows[i][s.feature] <= s.threshold);
                let left = tree.nodes.len();
                tree.nodes.push(Node::Leaf { score: 0.0 });
                tree.nodes.push(Node::Leaf { score: 0.0 });
                tree.nodes[slot] = Node::Split { feature: s.feature, threshold: s.threshold, left, right: left + 1 };
                stack.push((left + 1, r, depth + 1));
                stack.push((left, l, depth + 1));
            }
        }
    }
    tree
}

fn train_forest(p: &ForestParams, data: &LabeledDataset) -> Vec<Tree> {
    let n = data.len();
    (0..p.trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(p.rng_seed);
            rng.set_stream(t as u64);
            let rows: Vec<usize> = if p.bootstrap { (0..n).map(|_| rng.random_range(0..n)).collect() } else { (0..n).collect() };
            grow_tree(data, &rows, &p.tree, p.feature_sampling.then_some(&mut rng))
        })
        .collect()
}

fn train_mlp(p: &MlpParams, data: &LabeledDataset) -> Mlp {
    let mut rng = ChaCha8Rng::seed_from_u64(p.rng_seed);
    let mut net = Mlp::random(data.dim(), p.hidden, p.init_range, &mut rng);
    let mut params = net.params();
    for _ in 0..p.epochs {
        let g = net.gradient(&data.rows, &data.labels);
        for (w, gw) in params.iter_mut().zip(&g) {
            *w -= p.learning_rate * gw;
        }
        net.set_params(&params);
    }
    net
}

/// Probability of the dilated class.
pub fn predict_score(m: &TrainedModel, v: &[f64]) -> Result<f64> {
    let d = m.dim();
    let fits = match m {
        TrainedModel::Dt(_) | TrainedModel::Rf(_) => v.len() >= d,
        _ => v.len() == d,
    };
    if !fits {
        return Err(Error::DimensionMismatch(format!("{} model expects {d} features, got {}", m.kind(), v.len())));
    }
    Ok(match m {
        TrainedModel::Knn { k, rows, labels } => {
            let mut by_dist: Vec<(f64, usize)> =
                rows.iter().enumerate().map(|(i, r)| (r.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i)).collect();
            by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let take = (*k).min(rows.len());
            by_dist[..take].iter().filter(|&&(_, i)| labels[i].is_dilated()).count() as f64 / take as f64
        }
        TrainedModel::Svm { gamma, support, coef, bias } => {
            sigmoid(bias + support.iter().zip(coef).map(|(s, c)| c * rbf(*gamma, s, v)).sum::<f64>())
        }
        TrainedModel::Lr { weights, bias } => sigmoid(bias + dot(weights, v)),
        TrainedModel::Dt(t) => t.score(v),
        TrainedModel::Rf(ts) => ts.iter().map(|t| t.score(v)).sum::<f64>() / ts.len() as f64,
        TrainedModel::Mlp(net) => net.forward(v)[1],
    })
}

pub fn predict_label(m: &TrainedModel, v: &[f64]) -> Result<Label> {
    predict_score(m, v).map(Label::from_score)
}

const MODEL_MAGIC: &str = "biliscope-model 1";

/// Writes a model as a text manifest (magic, kind, shape lines, blank line)
/// followed by its parameters as little-endian `f32`.
pub fn save_model<W: Write>(m: &TrainedModel, out: W) -> Result<()> {
    let (shape, values): (Vec<String>, Vec<f64>) = match m {
        TrainedModel::Knn { k, rows, labels } => (
            vec![format!("k {k}"), format!("rows {} {}", rows.len(), m.dim())],
            rows.iter().flatten().copied().chain(labels.iter().map(Label::target)).collect(),
        ),
        TrainedModel::Svm { gamma, support, coef, bias } => (
            vec![format!("support {} {}", support.len(), m.dim())],
            [*gamma, *bias].into_iter().chain(support.iter().flatten().copied()).chain(coef.iter().copied()).collect(),
        ),
        TrainedModel::Lr { weights, bias } => {
            (vec![format!("weights {}", weights.len())], weights.iter().copied().chain([*bias]).collect())
        }
        TrainedModel::Dt(t) => (vec![format!("trees 1"), format!("nodes {}", t.nodes.len())], tree_values(t)),
        TrainedModel::Rf(ts) => (
            std::iter::once(format!("trees {}", ts.len())).chain(ts.iter().map(|t| format!("nodes {}", t.nodes.len()))).collect(),
            ts.iter().flat_map(tree_values).collect(),
        ),
        TrainedModel::Mlp(net) => (vec![format!("layers {} {} 2", net.inputs, net.hidden)], net.params()),
    };
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "{MODEL_MAGIC}")?;
    writeln!(w, "kind {}", m.kind())?;
    for line in shape {
        writeln!(w, "{line}")?;
    }
    writeln!(w, "values {}", values.len())?;
    writeln!(w)?;
    for v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn tree_values(t: &Tree) -> Vec<f64> {
    t.nodes
        .iter()
        .flat_map(|n| match *n {
            Node::Leaf { score } => [0.0, score, 0.0, 0.0, 0.0],
            Node::Split { feature, threshold, left, right } => [1.0, feature as f64, threshold, left as f64, right as f64],
        })
        .collect()
}

fn parse_tree(values: &[f64]) -> Result<Tree> {
    let count = values.len() / 5;
    let index = |v: f64| -> Result<usize> {
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::ModelShape(format!("bad tree index {v}")))
        }
    };
    let nodes = values
        .chunks_exact(5)
        .map(|c| match c[0] {
            0.0 => Ok(Node::Leaf { score: c[1] }),
            1.0 => {
                let (left, right) = (index(c[3])?, index(c[4])?);
                if left >= count || right >= count {
                    return Err(Error::ModelShape("tree child out of range".into()));
                }
                Ok(Node::Split { feature: index(c[1])?, threshold: c[2], left, right })
            }
            other => Err(Error::ModelShape(format!("unknown tree node tag {other}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if nodes.is_empty() {
        return Err(Error::ModelShape("empty tree".into()));
    }
    Ok(Tree { nodes })
}

pub fn load_model<R: Read>(input: R) -> Result<TrainedModel> {
    let mut r = std::io::BufReader::new(input);
    let mut header = Vec::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::ModelShape("model manifest ends before the data".into()));
        }
        let line = line.trim_end().to_string();
        if line.is_empty() {
            break;
        }
        header.push(line);
    }
    if header.first().map(String::as_str) != Some(MODEL_MAGIC) {
        return Err(Error::ModelShape("not a model file of a supported version".into()));
    }
    let fields: Vec<(String, Vec<usize>)> = header[1..]
        .iter()
        .filter(|l| !l.starts_with("kind "))
        .map(|l| {
            let mut parts = l.split_whitespace();
            let key = parts.next().unwrap_or_default().to_string();
            let nums = parts
                .map(|t| t.parse().map_err(|_| Error::Parse { token: t.to_string(), reason: format!("bad `{key}` shape") }))
                .collect::<Result<Vec<usize>>>()?;
            Ok((key, nums))
        })
        .collect::<Result<_>>()?;
    let kind_line = header.iter().find_map(|l| l.strip_prefix("kind ")).ok_or_else(|| Error::ModelShape("missing kind".into()))?;
    let kind = ModelKind::parse(kind_line)?;
    let get = |key: &str, n: usize| -> Result<&[usize]> {
        fields
            .iter()
            .find(|(k, v)| k == key && v.len() == n)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::ModelShape(format!("missing `{key}` with {n} values")))
    };
    let count = get("values", 1)?[0];
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 4 {
        return Err(Error::ModelShape(format!("expected {count} reals, found {} bytes", bytes.len())));
    }
    let values: Vec<f64> = bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
    let expect = |n: usize| {
        if n == values.len() {
            Ok(())
        } else {
            Err(Error::ModelShape(format!("{kind} shape needs {n} reals, file has {}", values.len())))
        }
    };
    Ok(match kind {
        ModelKind::Knn => {
            let k = get("k", 1)?[0];
            let (n, d) = (get("rows", 2)?[0], get("rows", 2)?[1]);
            expect(n * d + n)?;
            let rows = values[..n * d].chunks(d.max(1)).take(n).map(<[f64]>::to_vec).collect();
            let labels = values[n * d..].iter().map(|&t| if t >= 0.5 { Label::Dilated } else { Label::Normal }).collect();
            TrainedModel::Knn { k, rows, labels }
        }
        ModelKind::Svm => {
            let (n, d) = (get("support", 2)?[0], get("support", 2)?[1]);
            expect(2 + n * d + n)?;
            TrainedModel::Svm {
                gamma: values[0],
                bias: values[1],
                support: values[2..2 + n * d].chunks(d.max(1)).take(n).map(<[f64]>::to_vec).collect(),
                coef: values[2 + n * d..].to_vec(),
            }
        }
        ModelKind::Lr => {
            let d = get("weights", 1)?[0];
            expect(d + 1)?;
            TrainedModel::Lr { weights: values[..d].to_vec(), bias: values[d] }
        }
        ModelKind::Dt | ModelKind::Rf => {
            let sizes: Vec<usize> = fields.iter().filter(|(k, v)| k == "nodes" && v.len() == 1).map(|(_, v)| v[0]).collect();
            if sizes.len() != get("trees", 1)?[0] || sizes.is_empty() {
                return Err(Error::ModelShape("tree count does not match node lines".into()));
            }
            expect(sizes.iter().sum::<usize>() * 5)?;
            let mut at = 0;
            let mut trees = Vec::new();
            for s in sizes {
                trees.push(parse_tree(&values[at..at + 5 * s])?);
                at += 5 * s;
            }
            if kind == ModelKind::Dt {
                if trees.len() != 1 {
                    return Err(Error::ModelShape("a decision tree file holds exactly one tree".into()));
                }
                TrainedModel::Dt(trees.remove(0))
            } else {
                TrainedModel::Rf(trees)
            }
        }
        ModelKind::Mlp => {
            let l = get("layers", 3)?;
            if l[2] != 2 {
                return Err(Error::ModelShape("mlp output layer must have 2 neurons".into()));
            }
            let (d, h) = (l[0], l[1]);
            let mut net = Mlp { inputs: d, hidden: h, w1: vec![0.0; h * d], b1: vec![0.0; h], w2: vec![0.0; 2 * h], b2: vec![0.0; 2] };
            expect(net.parameter_count())?;
            net.set_params(&values);
            TrainedModel::Mlp(net)
        }
    })
}
