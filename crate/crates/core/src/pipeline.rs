//! End-to-end orchestration: configuration, the per-image cascade, dataset
//! assembly and model evaluation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{load_model, predict_score, save_model, train, Label, LabeledDataset, ModelKind, ModelSpec, TrainedModel};
use crate::denoiser::{self, ResidualNet, TrainConfig};
use crate::enhance::{dehaze, histogram_equalize, DehazeParams};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_models, CvOptions, EvalReport};
use crate::features::{
    apply_scaler, bile_duct_of, Blob, connected_components, extract_with, fit_scaler, read_feature_csv, write_feature_csv,
    FeatureConfig, FeatureMode, FeatureRow, FeatureVector, ScalerState, DEFAULT_GLCM_LEVELS,
};
use crate::phantom::{generate_corpus_with, read_manifest, CorpusSpec, PhantomSpec};
use crate::raster::{complement, load_netpbm, resize_bilinear, resize_rgb, sharpen, to_grayscale, AnyImage, GrayImage, Mask, WORK_SIDE};
use crate::segment::{self, default_seed, ChanVeseParams, SeedSpec};

/// Preprocessing stages in execution order; each yields one intermediate.
pub const PREPROCESS_STAGES: [&str; 8] =
    ["resize", "grayscale", "sharpen", "denoise", "equalize", "complement", "dehaze", "complement_back"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserMode {
    Weights(PathBuf),
    /// Gaussian smoothing used when no trained network is configured.
    Fallback { sigma: f64 },
}

/// Image the GLCM statistics are computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureSource {
    Grayscale,
    Denoised,
    Preprocessed,
}

impl TextureSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "grayscale" => Ok(Self::Grayscale),
            "denoised" => Ok(Self::Denoised),
            "preprocessed" => Ok(Self::Preprocessed),
            other => Err(Error::Config(format!("texture_source `{other}` (expected grayscale, denoised or preprocessed)"))),
        }
    }

    fn stage(&self) -> usize {
        match self {
            Self::Grayscale => 1,
            Self::Denoised => 3,
            Self::Preprocessed => 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Side of the square working image.
    pub work_size: usize,
    pub denoiser: DenoiserMode,
    pub dehaze: DehazeParams,
    pub seed: Option<SeedSpec>,
    pub chan_vese: ChanVeseParams,
    pub glcm_levels: usize,
    pub texture_source: TextureSource,
    pub feature_mode: FeatureMode,
    pub models: Vec<ModelSpec>,
    pub folds: usize,
    pub rng_seed: u64,
    pub per_fold_scaling: bool,
    /// Trained models and scaler used to classify single cases.
    pub models_dir: Option<PathBuf>,
    /// Segmented components smaller than this are discarded as speckle; the
    /// largest component is always kept.
    pub min_blob_area: usize,
    /// Masks smaller than this are flagged degenerate.
    pub min_mask_area: usize,
    pub max_degenerate_fraction: f64,
    pub worker_count: usize,
    pub denoiser_training: TrainConfig,
    pub denoiser_training_images: usize,
    pub phantom: PhantomSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            work_size: WORK_SIDE,
            denoiser: DenoiserMode::Fallback { sigma: 1.0 },
            dehaze: DehazeParams::default(),
            seed: None,
            chan_vese: ChanVeseParams::default(),
            glcm_levels: DEFAULT_GLCM_LEVELS,
            texture_source: TextureSource::Denoised,
            feature_mode: FeatureMode::Reduced4,
            models: ModelSpec::default_suite(0),
            folds: 10,
            rng_seed: 0,
            per_fold_scaling: false,
            models_dir: None,
            min_blob_area: 30,
            min_mask_area: 10,
            max_degenerate_fraction: 0.2,
            worker_count: 2,
            denoiser_training: TrainConfig::default(),
            denoiser_training_images: 20,
            phantom: PhantomSpec::default(),
        }
    }
}

/// Keys accepted by [`PipelineConfig::parse`], one per line in `key = value`
/// form.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("work_size", "side of the square working image in pixels"),
    ("denoiser_weights", "path of trained denoiser weights"),
    ("denoiser_sigma", "Gaussian fallback sigma when no weights are given"),
    ("dehaze_patch_radius", "dark-channel window half-width"),
    ("dehaze_omega", "fraction of haze removed"),
    ("dehaze_t_floor", "lower bound on transmission"),
    ("dehaze_airlight_fraction", "top dark-channel fraction averaged into the airlight"),
    ("seed_row", "seed center row (with seed_col)"),
    ("seed_col", "seed center column (with seed_row)"),
    ("seed_half_size", "seed half-size"),
    ("cv_mu", "contour length weight"),
    ("cv_nu", "area weight"),
    ("cv_lambda1", "inside fit weight"),
    ("cv_lambda2", "outside fit weight"),
    ("cv_epsilon", "Heaviside smoothing width"),
    ("cv_dt", "time step"),
    ("cv_iterations", "iteration count"),
    ("cv_snapshot_every", "snapshot cadence, 0 disables"),
    ("glcm_levels", "GLCM gray levels"),
    ("texture_source", "grayscale, denoised or preprocessed"),
    ("feature_mode", "reduced4 or full10"),
    ("models", "comma-separated model kinds: knn, svm, lr, dt, rf, mlp"),
    ("folds", "cross-validation folds"),
    ("rng_seed", "seed for every random choice"),
    ("per_fold_scaling", "refit the scaler inside each fold (true/false)"),
    ("models_dir", "directory of trained models used to classify cases"),
    ("min_blob_area", "segmented components below this many pixels are dropped"),
    ("min_mask_area", "masks below this many pixels are degenerate"),
    ("max_degenerate_fraction", "corpus quality limit"),
    ("worker_count", "concurrent service jobs"),
    ("train_noise_sigma", "denoiser training noise"),
    ("train_patch_size", "denoiser training patch side"),
    ("train_epochs", "denoiser training epochs"),
    ("train_batch_size", "denoiser minibatch size"),
    ("train_learning_rate", "denoiser learning rate"),
    ("train_momentum", "denoiser momentum"),
    ("train_depth", "denoiser layer count"),
    ("train_channels", "denoiser feature channels"),
    ("train_images", "clean phantoms rendered for denoiser training"),
    ("phantom_size", "phantom side in pixels"),
    ("phantom_noise_sigma", "phantom noise"),
    ("phantom_haze", "phantom haze strength"),
    ("phantom_stones", "filling defects per dilated phantom"),
];

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

impl PipelineConfig {
    /// Parses `key = value` lines; `#` starts a comment. Relative paths are
    /// resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let (mut seed_row, mut seed_col, mut seed_half) = (None, None, None);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let path = |v: &str| {
                let p = Path::new(v);
                if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) }
            };
            match key {
                "work_size" => cfg.work_size = parse_value(key, value)?,
                "denoiser_weights" => cfg.denoiser = DenoiserMode::Weights(path(value)),
                "denoiser_sigma" => cfg.denoiser = DenoiserMode::Fallback { sigma: parse_value(key, value)? },
                "dehaze_patch_radius" => cfg.dehaze.patch_radius = parse_value(key, value)?,
                "dehaze_omega" => cfg.dehaze.omega = parse_value(key, value)?,
                "dehaze_t_floor" => cfg.dehaze.t_floor = parse_value(key, value)?,
                "dehaze_airlight_fraction" => cfg.dehaze.airlight_fraction = parse_value(key, value)?,
                "seed_row" => seed_row = Some(parse_value(key, value)?),
                "seed_col" => seed_col = Some(parse_value(key, value)?),
                "seed_half_size" => seed_half = Some(parse_value(key, value)?),
                "cv_mu" => cfg.chan_vese.mu = parse_value(key, value)?,
                "cv_nu" => cfg.chan_vese.nu = parse_value(key, value)?,
                "cv_lambda1" => cfg.chan_vese.lambda1 = parse_value(key, value)?,
                "cv_lambda2" => cfg.chan_vese.lambda2 = parse_value(key, value)?,
                "cv_epsilon" => cfg.chan_vese.epsilon = parse_value(key, value)?,
                "cv_dt" => cfg.chan_vese.dt = parse_value(key, value)?,
                "cv_iterations" => cfg.chan_vese.iterations = parse_value(key, value)?,
                "cv_snapshot_every" => cfg.chan_vese.snapshot_every = parse_value(key, value)?,
                "glcm_levels" => cfg.glcm_levels = parse_value(key, value)?,
                "texture_source" => cfg.texture_source = TextureSource::parse(value)?,
                "feature_mode" => cfg.feature_mode = FeatureMode::parse(value)?,
                "models" => {
                    cfg.models = value
                        .split(',')
                        .map(|k| ModelKind::parse(k.trim()).map(|kind| ModelSpec::default_for(kind, 0)))
                        .collect::<Result<_>>()
                        .map_err(|e| Error::Config(e.to_string()))?
                }
                "folds" => cfg.folds = parse_value(key, value)?,
                "rng_seed" => cfg.rng_seed = parse_value(key, value)?,
                "per_fold_scaling" => cfg.per_fold_scaling = parse_value(key, value)?,
                "models_dir" => cfg.models_dir = Some(path(value)),
                "min_blob_area" => cfg.min_blob_area = parse_value(key, value)?,
                "min_mask_area" => cfg.min_mask_area = parse_value(key, value)?,
                "max_degenerate_fraction" => cfg.max_degenerate_fraction = parse_value(key, value)?,
                "worker_count" => cfg.worker_count = parse_value(key, value)?,
                "train_noise_sigma" => cfg.denoiser_training.noise_sigma = parse_value(key, value)?,
                "train_patch_size" => cfg.denoiser_training.patch_size = parse_value(key, value)?,
                "train_epochs" => cfg.denoiser_training.epochs = parse_value(key, value)?,
                "train_batch_size" => cfg.denoiser_training.batch_size = parse_value(key, value)?,
                "train_learning_rate" => cfg.denoiser_training.learning_rate = parse_value(key, value)?,
                "train_momentum" => cfg.denoiser_training.momentum = parse_value(key, value)?,
                "train_depth" => cfg.denoiser_training.depth = parse_value(key, value)?,
                "train_channels" => cfg.denoiser_training.channels = parse_value(key, value)?,
                "train_images" => cfg.denoiser_training_images = parse_value(key, value)?,
                "phantom_size" => cfg.phantom.size = parse_value(key, value)?,
                "phantom_noise_sigma" => cfg.phantom.noise_sigma = parse_value(key, value)?,
                "phantom_haze" => cfg.phantom.haze_strength = parse_value(key, value)?,
                "phantom_stones" => cfg.phantom.stones = parse_value(key, value)?,
                other => return Err(Error::Config(format!("line {}: unknown key `{other}`", n + 1))),
            }
        }
        match (seed_row, seed_col) {
            (Some(r), Some(c)) => {
                cfg.seed = Some(SeedSpec { center_row: r, center_col: c, half_size: seed_half.unwrap_or(segment::DEFAULT_HALF_SIZE) })
            }
            (None, None) => {
                if seed_half.is_some() {
                    return Err(Error::Config("seed_half_size needs seed_row and seed_col".into()));
                }
            }
            _ => return Err(Error::Config("seed_row and seed_col must be given together".into())),
        }
        // model seeds follow the configured rng_seed
        let seed = cfg.rng_seed;
        for m in &mut cfg.models {
            *m = reseed(*m, seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.work_size < 2 * segment::DEFAULT_HALF_SIZE + 2 {
            return Err(Error::Config(format!("work_size {} is too small", self.work_size)));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.glcm_levels < 2 {
            return Err(Error::Config("glcm_levels must be at least 2".into()));
        }
        if self.worker_count == 0 {
            return Err(Error::Config("worker_count must be at least 1".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("no models configured".into()));
        }
        if let DenoiserMode::Fallback { sigma } = self.denoiser {
            if !(sigma > 0.0) {
                return Err(Error::Config("denoiser_sigma must be positive".into()));
            }
        }
        self.dehaze.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.chan_vese.validate().map_err(|e| Error::Config(e.to_string()))?;
        for m in &self.models {
            m.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig { axis_normalizer: self.work_size as f64, glcm_levels: self.glcm_levels }
    }

    pub fn cv_options(&self) -> CvOptions {
        CvOptions { folds: self.folds, rng_seed: self.rng_seed, per_fold_scaling: self.per_fold_scaling }
    }
}

fn reseed(spec: ModelSpec, seed: u64) -> ModelSpec {
    match spec {
        ModelSpec::Svm(p) => ModelSpec::Svm(crate::classify::SvmParams { rng_seed: seed, ..p }),
        ModelSpec::Rf(p) => ModelSpec::Rf(crate::classify::ForestParams { rng_seed: seed, ..p }),
        ModelSpec::Mlp(p) => ModelSpec::Mlp(crate::classify::MlpParams { rng_seed: seed, ..p }),
        other => other,
    }
}

/// Stage failure recorded in a [`CaseResult`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.message)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Intermediate {
    pub stage: &'static str,
    pub image: GrayImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model: String,
    pub score: f64,
    pub label: Label,
}

/// Everything one pass of the cascade produced. Images, masks and snapshots
/// are carried alongside but left out of the JSON form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub image_id: String,
    /// Names of completed stages in execution order.
    pub stages: Vec<String>,
    pub width: usize,
    pub height: usize,
    pub seed: Option<SeedSpec>,
    pub mask_area: Option<usize>,
    pub duct_area: Option<usize>,
    pub features: Option<FeatureVector>,
    pub feature_mode: FeatureMode,
    pub scores: Vec<ModelScore>,
    /// Mean model score thresholded at 0.5.
    pub prediction: Option<Label>,
    pub prediction_score: Option<f64>,
    pub degenerate: Vec<String>,
    pub error: Option<StageError>,
    pub snapshot_count: usize,
    #[serde(skip)]
    pub intermediates: Vec<Intermediate>,
    #[serde(skip)]
    pub mask: Option<Mask>,
    #[serde(skip)]
    pub snapshots: Vec<Mask>,
}

impl CaseResult {
    fn new(image_id: &str, feature_mode: FeatureMode) -> Self {
        Self {
            image_id: image_id.to_string(),
            stages: Vec::new(),
            width: 0,
            height: 0,
            seed: None,
            mask_area: None,
            duct_area: None,
            features: None,
            feature_mode,
            scores: Vec::new(),
            prediction: None,
            prediction_score: None,
            degenerate: Vec::new(),
            error: None,
            snapshot_count: 0,
            intermediates: Vec::new(),
            mask: None,
            snapshots: Vec::new(),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.error.is_some() || !self.degenerate.is_empty()
    }

    fn fail(mut self, stage: &str, e: Error) -> Self {
        self.error = Some(StageError { stage: stage.to_string(), message: e.to_string() });
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("case result serializes")
    }
}

pub const DEGENERATE_MASK: &str = "mask_area";
pub const DEGENERATE_TEXTURE: &str = "texture";

/// Per-run overrides used by the service.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub seed: Option<SeedSpec>,
    pub iterations: Option<usize>,
    pub feature_mode: Option<FeatureMode>,
    pub snapshot_every: Option<usize>,
}

/// Trained models with the scaler and feature mode they were fit under.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub scaler: ScalerState,
    pub feature_mode: FeatureMode,
    pub models: Vec<TrainedModel>,
}

#[derive(Serialize, Deserialize)]
struct BundleIndex {
    feature_mode: FeatureMode,
    scaler: ScalerState,
    models: Vec<String>,
}

impl ModelBundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut names = Vec::new();
        for m in &self.models {
            let name = format!("{}.model", m.kind());
            let mut buf = Vec::new();
            save_model(m, &mut buf)?;
            fs::write(dir.join(&name), buf)?;
            names.push(name);
        }
        let index = BundleIndex { feature_mode: self.feature_mode, scaler: self.scaler.clone(), models: names };
        fs::write(dir.join("models.json"), serde_json::to_string_pretty(&index).map_err(|e| Error::Io(e.to_string()))?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("models.json"))?;
        let index: BundleIndex =
            serde_json::from_str(&text).map_err(|e| Error::Parse { token: "models.json".into(), reason: e.to_string() })?;
        let models = index.models.iter().map(|n| load_model(fs::File::open(dir.join(n))?)).collect::<Result<_>>()?;
        Ok(Self { scaler: index.scaler, feature_mode: index.feature_mode, models })
    }

    /// Per-model scores for a raw ten-feature vector.
    pub fn score(&self, v: &FeatureVector, mode: FeatureMode) -> Result<Vec<ModelScore>> {
        let scaled: [f64; 10] = apply_scaler(&self.scaler, &v.to_array())?
            .try_into()
            .map_err(|_| Error::ModelShape("scaler does not cover ten features".into()))?;
        let input = mode.select(&scaled);
        self.models
            .iter()
            .map(|m| {
                let score = predict_score(m, &input)?;
                Ok(ModelScore { model: m.kind().name().to_string(), score, label: Label::from_score(score) })
            })
            .collect()
    }
}

/// A configuration with its denoiser and models loaded, ready to run cases.
pub struct Pipeline {
    pub config: PipelineConfig,
    net: Option<ResidualNet>,
    bundle: Option<ModelBundle>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let net = match &config.denoiser {
            DenoiserMode::Weights(p) => Some(denoiser::load_weights(&fs::read(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?)?),
            DenoiserMode::Fallback { .. } => None,
        };
        let bundle = config.models_dir.as_deref().map(ModelBundle::load).transpose()?;
        Ok(Self { config, net, bundle })
    }

    /// Replaces the configured denoiser with an in-memory net.
    pub fn with_denoiser(mut self, net: ResidualNet) -> Self {
        self.net = Some(net);
        self
    }

    pub fn with_bundle(mut self, bundle: ModelBundle) -> Self {
        self.bundle = Some(bundle);
        self
    }

    pub fn bundle(&self) -> Option<&ModelBundle> {
        self.bundle.as_ref()
    }

    pub fn run_bytes(&self, image_id: &str, bytes: &[u8]) -> CaseResult {
        self.run_bytes_with(image_id, bytes, &RunOptions::default(), |_, _| {})
    }

    pub fn run_bytes_with(
        &self,
        image_id: &str,
        bytes: &[u8],
        opts: &RunOptions,
        progress: impl FnMut(usize, usize),
    ) -> CaseResult {
        let mode = opts.feature_mode.unwrap_or(self.config.feature_mode);
        match load_netpbm(bytes) {
            Ok(img) => self.run_image_with(image_id, &img, opts, progress),
            Err(e) => CaseResult::new(image_id, mode).fail("decode", e),
        }
    }

    pub fn run_image(&self, image_id: &str, img: &AnyImage) -> CaseResult {
        self.run_image_with(image_id, img, &RunOptions::default(), |_, _| {})
    }

    /// Runs the cascade, stopping at the first failing stage.
    pub fn run_image_with(
        &self,
        image_id: &str,
        img: &AnyImage,
        opts: &RunOptions,
        progress: impl FnMut(usize, usize),
    ) -> CaseResult {
        let cfg = &self.config;
        let mode = opts.feature_mode.unwrap_or(cfg.feature_mode);
        let mut res = CaseResult::new(image_id, mode);
        res.stages.push("decode".into());
        let n = cfg.work_size;
        res.width = n;
        res.height = n;

        let (resized_preview, gray) = match img {
            AnyImage::Gray(g) => {
                let r = resize_bilinear(g, n, n);
                (r.clone(), r)
            }
            AnyImage::Rgb(c) => {
                let r = resize_rgb(c, n, n);
                let g = to_grayscale(&r);
                (g.clone(), g)
            }
        };
        let record = |res: &mut CaseResult, stage: &'static str, image: GrayImage| {
            res.stages.push(stage.to_string());
            res.intermediates.push(Intermediate { stage, image });
        };
        record(&mut res, "resize", resized_preview);
        record(&mut res, "grayscale", gray.clone());
        let sharp = sharpen(&gray);
        record(&mut res, "sharpen", sharp.clone());
        let denoised = match (&self.net, &cfg.denoiser) {
            (Some(net), _) => denoiser::infer(net, &sharp),
            (None, DenoiserMode::Fallback { sigma }) => denoiser::gaussian_fallback(&sharp, *sigma),
            (None, DenoiserMode::Weights(_)) => Err(Error::ModelShape("denoiser weights not loaded".into())),
        };
        let denoised = match denoised {
            Ok(d) => d,
            Err(e) => return res.fail("denoise", e),
        };
        record(&mut res, "denoise", denoised.clone());
        let eq = histogram_equalize(&denoised);
        record(&mut res, "equalize", eq.clone());
        let inv = complement(&eq);
        record(&mut res, "complement", inv.clone());
        let clear = dehaze(&inv, &cfg.dehaze);
        record(&mut res, "dehaze", clear.clone());
        let prepared = complement(&clear);
        record(&mut res, "complement_back", prepared.clone());

        let seed = match opts.seed.or(cfg.seed).map_or_else(|| default_seed(n, n), |s| s.check_inside(n, n).map(|_| s)) {
            Ok(s) => s,
            Err(e) => return res.fail("segment", e),
        };
        res.seed = Some(seed);
        let mut cv = cfg.chan_vese;
        if let Some(it) = opts.iterations {
            cv.iterations = it;
        }
        if let Some(every) = opts.snapshot_every {
            cv.snapshot_every = every;
        }
        let seg = match segment::run_observed(&prepared, &seed, &cv, progress) {
            Ok(s) => s,
            Err(e) => return res.fail("segment", e),
        };
        res.stages.push("segment".into());
        let blobs = drop_speckle(connected_components(&seg.mask), cfg.min_blob_area);
        let mask = blobs_to_mask(&blobs, n, n);
        let area = mask.count();
        res.mask_area = Some(area);
        res.snapshot_count = seg.snapshots.len();
        res.snapshots = seg.snapshots;
        if area < cfg.min_mask_area {
            res.degenerate.push(DEGENERATE_MASK.into());
        }
        res.mask = Some(mask.clone());

        let duct = match bile_duct_of(&blobs) {
            Ok(d) => d,
            Err(e) => return res.fail("extract", e),
        };
        res.duct_area = Some(duct.area());
        let texture_image = &res.intermediates[cfg.texture_source.stage()].image;
        let extracted = match extract_with(texture_image, &mask, duct, &cfg.feature_config()) {
            Ok(x) => x,
            Err(e) => return res.fail("extract", e),
        };
        if extracted.texture_degenerate {
            res.degenerate.push(DEGENERATE_TEXTURE.into());
        }
        res.features = Some(extracted.features);
        res.stages.push("extract".into());

        if let Some(bundle) = &self.bundle {
            match bundle.score(&extracted.features, mode) {
                Ok(scores) => {
                    let mean = scores.iter().map(|s| s.score).sum::<f64>() / scores.len().max(1) as f64;
                    res.prediction = (!scores.is_empty()).then(|| Label::from_score(mean));
                    res.prediction_score = (!scores.is_empty()).then_some(mean);
                    res.scores = scores;
                    res.stages.push("classify".into());
                }
                Err(e) => return res.fail("classify", e),
            }
        }
        res
    }
}

/// Keeps components of at least `min_area` pixels, or the largest one when
/// none qualifies.
pub fn drop_speckle(blobs: Vec<Blob>, min_area: usize) -> Vec<Blob> {
    if blobs.iter().any(|b| b.area() >= min_area) {
        blobs.into_iter().filter(|b| b.area() >= min_area).collect()
    } else {
        bile_duct_of(&blobs).map(|b| vec![b.clone()]).unwrap_or_default()
    }
}

fn blobs_to_mask(blobs: &[Blob], width: usize, height: usize) -> Mask {
    let mut mask = Mask::empty(width, height);
    for b in blobs {
        for &(r, c) in &b.pixels {
            mask.set(r, c, true);
        }
    }
    mask
}

/// One-shot convenience over [`Pipeline`].
pub fn run_case(cfg: &PipelineConfig, image_id: &str, bytes: &[u8]) -> Result<CaseResult> {
    Ok(Pipeline::new(cfg.clone())?.run_bytes(image_id, bytes))
}

/// Writes the intermediates as `NN_stage.pgm` and the mask as `mask.pgm`.
pub fn write_intermediates(res: &CaseResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (i, im) in res.intermediates.iter().enumerate() {
        let p = dir.join(format!("{:02}_{}.pgm", i + 1, im.stage));
        fs::write(&p, crate::raster::save_pgm(&im.image))?;
        written.push(p);
    }
    if let Some(m) = &res.mask {
        let p = dir.join("mask.pgm");
        fs::write(&p, crate::raster::save_pgm(&m.to_gray()))?;
        written.push(p);
    }
    Ok(written)
}

/// Result of running the cascade over a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Scaled rows in manifest order, degenerate ones flagged.
    pub rows: Vec<FeatureRow>,
    /// Unscaled feature vectors, `None` where extraction failed.
    pub raw: Vec<Option<FeatureVector>>,
    pub scaler: ScalerState,
}

impl Dataset {
    pub fn degenerate_count(&self) -> usize {
        self.rows.iter().filter(|r| r.degenerate).count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        write_feature_csv(&self.rows, &mut buf)?;
        fs::write(path, buf)?;
        fs::write(scaler_path(path), serde_json::to_string_pretty(&self.scaler).map_err(|e| Error::Io(e.to_string()))?)?;
        Ok(())
    }
}

/// Sidecar holding the corpus scaler next to a feature CSV.
pub fn scaler_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".scaler.json");
    PathBuf::from(s)
}

pub fn read_scaler(csv: &Path) -> Result<ScalerState> {
    let text = fs::read_to_string(scaler_path(csv))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { token: "scaler".into(), reason: e.to_string() })
}

/// Runs every `(id, label, image)` case and scales the non-degenerate
/// feature vectors with a scaler fit on all of them.
pub fn build_dataset_from_cases(pipeline: &Pipeline, cases: &[(String, Label, AnyImage)]) -> Result<Dataset> {
    let results: Vec<CaseResult> = cases.par_iter().map(|(id, _, img)| pipeline.run_image(id, img)).collect();
    assemble_dataset(&pipeline.config, cases.iter().map(|(id, l, _)| (id.clone(), *l)).collect(), &results)
}

pub fn assemble_dataset(cfg: &PipelineConfig, ids: Vec<(String, Label)>, results: &[CaseResult]) -> Result<Dataset> {
    let total = results.len();
    let degenerate = results.iter().filter(|r| r.is_degenerate() || r.features.is_none()).count();
    if total == 0 || degenerate as f64 > cfg.max_degenerate_fraction * total as f64 {
        return Err(Error::CorpusQuality { degenerate, total });
    }
    let good: Vec<[f64; 10]> =
        results.iter().filter(|r| !r.is_degenerate()).filter_map(|r| r.features.map(|f| f.to_array())).collect();
    let scaler = fit_scaler(&good)?;
    let rows = ids
        .into_iter()
        .zip(results)
        .map(|((id, label), r)| {
            let values = match r.features {
                Some(f) => apply_scaler(&scaler, &f.to_array())?.try_into().expect("ten features"),
                None => [0.0; 10],
            };
            Ok(FeatureRow { id, label, values, degenerate: r.is_degenerate() || r.features.is_none() })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { rows, raw: results.iter().map(|r| r.features).collect(), scaler })
}

/// Runs the cascade over every manifest entry.
pub fn build_dataset(cfg: &PipelineConfig, manifest: &Path) -> Result<Dataset> {
    build_dataset_with(&Pipeline::new(cfg.clone())?, manifest)
}

/// [`build_dataset`] with an already assembled pipeline.
pub fn build_dataset_with(pipeline: &Pipeline, manifest: &Path) -> Result<Dataset> {
    let entries = read_manifest(manifest)?;
    let cases = entries
        .iter()
        .map(|e| Ok((e.id.clone(), e.label, load_netpbm(&fs::read(&e.image_path)?)?)))
        .collect::<Result<Vec<_>>>()?;
    build_dataset_from_cases(pipeline, &cases)
}

/// Non-degenerate rows projected onto the configured feature mode.
pub fn labeled_dataset(rows: &[FeatureRow], mode: FeatureMode) -> Result<LabeledDataset> {
    let kept: Vec<&FeatureRow> = rows.iter().filter(|r| !r.degenerate).collect();
    LabeledDataset::new(
        kept.iter().map(|r| mode.select(&r.values)).collect(),
        kept.iter().map(|r| r.label).collect(),
        mode.feature_names().iter().map(|s| s.to_string()).collect(),
    )
}

pub fn read_dataset_csv(path: &Path) -> Result<Vec<FeatureRow>> {
    read_feature_csv(fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?)
}

/// Cross-validates every configured model.
pub fn evaluate_all(cfg: &PipelineConfig, rows: &[FeatureRow]) -> Result<EvalReport> {
    let data = labeled_dataset(rows, cfg.feature_mode)?;
    evaluate_models(&cfg.models, &data, &cfg.cv_options())
}

/// Trains every configured model on all non-degenerate rows.
pub fn train_bundle(cfg: &PipelineConfig, rows: &[FeatureRow], scaler: &ScalerState) -> Result<ModelBundle> {
    let data = labeled_dataset(rows, cfg.feature_mode)?;
    let models = cfg.models.iter().map(|s| train(s, &data)).collect::<Result<_>>()?;
    Ok(ModelBundle { scaler: scaler.clone(), feature_mode: cfg.feature_mode, models })
}

/// Trains a denoiser on a clean phantom corpus rendered from the configured
/// spec.
pub fn train_denoiser(cfg: &PipelineConfig) -> Result<ResidualNet> {
    let per_class = cfg.denoiser_training_images.div_ceil(2).max(1);
    // the default width ranges are sized for 256 px phantoms
    let shrink = (cfg.phantom.size as f64 / 256.0).min(1.0);
    let base = CorpusSpec::new(per_class, cfg.phantom, cfg.rng_seed);
    let normal_widths = (base.normal_widths.0 * shrink, base.normal_widths.1 * shrink);
    let dilated_widths = (base.dilated_widths.0 * shrink, base.dilated_widths.1 * shrink);
    let mut threshold = cfg.phantom.dilation_threshold_px;
    if !(normal_widths.1..dilated_widths.0).contains(&threshold) {
        threshold = 0.5 * (normal_widths.1 + dilated_widths.0);
    }
    let clean = PhantomSpec { noise_sigma: 0.0, haze_strength: 0.0, dilation_threshold_px: threshold, ..cfg.phantom };
    let spec = CorpusSpec { base: clean, normal_widths, dilated_widths, ..base };
    let images: Vec<GrayImage> = generate_corpus_with(&spec)?.into_iter().map(|c| c.sample.image).collect();
    denoiser::train(&TrainConfig { rng_seed: cfg.rng_seed, ..cfg.denoiser_training.clone() }, &images)
}
