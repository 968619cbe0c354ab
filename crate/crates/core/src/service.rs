//! HTTP facade over the pipeline for the review front end.
//!
//! Storage is a flat directory:
//!
//! ```text
//! blobs/<sha256>            uploaded netpbm bytes, content addressed
//! images.log                one `id sha256 width height` line per upload
//! jobs.log                  one JSON event per job state change
//! jobs/<id>/result.json     finished case result
//! jobs/<id>/snap_NNN.pgm    contour snapshots as P5 masks
//! reviews.log               one JSON review record per line
//! ```
//!
//! Images, finished jobs and reviews survive a restart. Jobs that were queued
//! or running when the process stopped come back as failed.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;
use tower_http::services::ServeDir;

use crate::classify::Label;
use crate::error::{Error, Result};
use crate::features::FeatureMode;
use crate::pipeline::{CaseResult, ModelScore, Pipeline, RunOptions, StageError};
use crate::raster::{load_netpbm, save_pgm, AnyImage};
use crate::segment::{default_seed, SeedSpec, DEFAULT_HALF_SIZE};

pub const DEFAULT_SNAPSHOT_EVERY: usize = 25;
const BODY_LIMIT: usize = 64 * 1024 * 1024;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub storage_dir: PathBuf,
    pub worker_count: usize,
    /// Static front-end files served under `/ui`.
    pub ui_dir: Option<PathBuf>,
    pub snapshot_every: usize,
}

impl ServiceConfig {
    pub fn new(storage_dir: impl Into<PathBuf>) -> Self {
        Self { storage_dir: storage_dir.into(), worker_count: 2, ui_dir: None, snapshot_every: DEFAULT_SNAPSHOT_EVERY }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ImageEntry {
    image_id: String,
    sha256: String,
    width: usize,
    height: usize,
}

struct Job {
    image_id: String,
    seed: SeedSpec,
    state: JobState,
    completed: Arc<AtomicUsize>,
    total: usize,
    /// Serialized once so repeated reads return the same bytes.
    result_json: Option<Arc<String>>,
    result: Option<Arc<CaseResult>>,
    snapshots: Vec<Arc<Vec<u8>>>,
    error: Option<StageError>,
}

/// One clinician decision on an image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub image_id: String,
    pub job_id: Option<String>,
    pub predicted_label: Option<Label>,
    pub prediction_score: Option<f64>,
    pub scores: Vec<ModelScore>,
    pub clinician_label: Option<Label>,
    pub timestamp: String,
}

#[derive(Serialize, Deserialize)]
struct JobEvent {
    job_id: String,
    state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<SeedSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    total: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<StageError>,
}

struct Tables {
    images: Vec<ImageEntry>,
    jobs: HashMap<String, Job>,
    job_order: Vec<String>,
    reviews: Vec<ReviewRecord>,
    next_job: usize,
}

/// Shared server state.
pub struct AppState {
    pipeline: Arc<Pipeline>,
    config: ServiceConfig,
    tables: Mutex<Tables>,
    workers: Arc<Semaphore>,
}

impl AppState {
    /// Opens (or creates) the storage directory and replays its logs.
    pub fn open(pipeline: Pipeline, config: ServiceConfig) -> Result<Arc<Self>> {
        if config.worker_count == 0 {
            return Err(Error::InvalidParameter("worker_count must be at least 1".into()));
        }
        let dir = &config.storage_dir;
        fs::create_dir_all(dir.join("blobs"))?;
        fs::create_dir_all(dir.join("jobs"))?;
        let images = load_images(dir)?;
        let reviews = load_reviews(dir)?;
        let (jobs, job_order, interrupted) = load_jobs(dir)?;
        let next_job = job_order.iter().filter_map(|id| id.strip_prefix("job-")?.parse::<usize>().ok()).max().map_or(1, |n| n + 1);
        let state = Arc::new(Self {
            pipeline: Arc::new(pipeline),
            workers: Arc::new(Semaphore::new(config.worker_count)),
            config,
            tables: Mutex::new(Tables { images, jobs, job_order, reviews, next_job }),
        });
        for ev in interrupted {
            state.log_job(&ev)?;
        }
        Ok(state)
    }

    fn dir(&self) -> &Path {
        &self.config.storage_dir
    }

    fn append(&self, file: &str, line: &str) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.dir().join(file))?;
        writeln!(f, "{line}")?;
        f.sync_data()?;
        Ok(())
    }

    fn log_job(&self, ev: &JobEvent) -> Result<()> {
        self.append("jobs.log", &serde_json::to_string(ev).expect("job event serializes"))
    }

    fn blob_path(&self, sha: &str) -> PathBuf {
        self.dir().join("blobs").join(sha)
    }
}

fn load_images(dir: &Path) -> Result<Vec<ImageEntry>> {
    let path = dir.join("images.log");
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(&path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let bad = || Error::Parse { token: line.to_string(), reason: "expected `id sha256 width height`".into() };
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [id, sha, w, h] = parts[..] else { return Err(bad()) };
            Ok(ImageEntry {
                image_id: id.to_string(),
                sha256: sha.to_string(),
                width: w.parse().map_err(|_| bad())?,
                height: h.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn load_reviews(dir: &Path) -> Result<Vec<ReviewRecord>> {
    let path = dir.join("reviews.log");
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(&path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse { token: "reviews.log".into(), reason: e.to_string() }))
        .collect()
}

type LoadedJobs = (HashMap<String, Job>, Vec<String>, Vec<JobEvent>);

fn load_jobs(dir: &Path) -> Result<LoadedJobs> {
    let mut jobs = HashMap::new();
    let mut order = Vec::new();
    let path = dir.join("jobs.log");
    if path.exists() {
        for line in fs::read_to_string(&path)?.lines().filter(|l| !l.trim().is_empty()) {
            let ev: JobEvent =
                serde_json::from_str(line).map_err(|e| Error::Parse { token: "jobs.log".into(), reason: e.to_string() })?;
            if ev.state == JobState::Queued {
                order.push(ev.job_id.clone());
                jobs.insert(
                    ev.job_id.clone(),
                    Job {
                        image_id: ev.image_id.unwrap_or_default(),
                        seed: ev.seed.unwrap_or(SeedSpec { center_row: 0, center_col: 0, half_size: 0 }),
                        state: JobState::Queued,
                        completed: Arc::new(AtomicUsize::new(0)),
                        total: ev.total.unwrap_or(0),
                        result_json: None,
                        result: None,
                        snapshots: Vec::new(),
                        error: None,
                    },
                );
            } else if let Some(job) = jobs.get_mut(&ev.job_id) {
                job.state = ev.state;
                job.error = ev.error;
            }
        }
    }
    let mut interrupted = Vec::new();
    for id in &order {
        let job = jobs.get_mut(id).expect("ordered job exists");
        if job.state == JobState::Done {
            let jdir = dir.join("jobs").join(id);
            match fs::read_to_string(jdir.join("result.json")) {
                Ok(text) => {
                    let res: CaseResult = serde_json::from_str(&text)
                        .map_err(|e| Error::Parse { token: format!("{id}/result.json"), reason: e.to_string() })?;
                    job.snapshots = (0..res.snapshot_count)
                        .map(|k| fs::read(jdir.join(snapshot_name(k))).map(Arc::new))
                        .collect::<std::io::Result<_>>()?;
                    job.completed.store(job.total, Ordering::Relaxed);
                    job.result_json = Some(Arc::new(text));
                    job.result = Some(Arc::new(res));
                    continue;
                }
                Err(_) => job.state = JobState::Failed,
            }
        }
        if matches!(job.state, JobState::Queued | JobState::Running | JobState::Failed) && job.error.is_none() {
            job.state = JobState::Failed;
            let error = StageError { stage: "service".into(), message: "interrupted by restart".into() };
            job.error = Some(error.clone());
            interrupted.push(JobEvent { job_id: id.clone(), state: JobState::Failed, image_id: None, seed: None, total: None, error: Some(error) });
        }
    }
    Ok((jobs, order, interrupted))
}

fn snapshot_name(k: usize) -> String {
    format!("snap_{k:03}.pgm")
}

/// Builds the router for an opened state.
pub fn router(state: Arc<AppState>) -> Router {
    let mut app = Router::new()
        .route("/images", post(upload_image).get(list_images))
        .route("/images/{id}", get(get_image))
        .route("/jobs", post(submit_job).get(list_jobs))
        .route("/jobs/{id}", get(job_status))
        .route("/jobs/{id}/snapshots/{k}", get(job_snapshot))
        .route("/jobs/{id}/result", get(job_result))
        .route("/reviews", post(post_review).get(list_reviews));
    if let Some(ui) = &state.config.ui_dir {
        app = app.nest_service("/ui", ServeDir::new(ui));
    }
    app.layer(DefaultBodyLimit::max(BODY_LIMIT)).with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await?;
    Ok(())
}

fn error_response(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn internal(e: impl std::fmt::Display) -> Response {
    error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

async fn upload_image(State(st): State<Arc<AppState>>, body: Bytes) -> Response {
    if body.is_empty() {
        return error_response(StatusCode::BAD_REQUEST, "empty body");
    }
    let img = match load_netpbm(&body) {
        Ok(img) => img,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let (width, height) = match &img {
        AnyImage::Gray(g) => g.dims(),
        AnyImage::Rgb(c) => (c.width(), c.height()),
    };
    let sha = hex::encode(Sha256::digest(&body));
    let blob = st.blob_path(&sha);
    if !blob.exists() {
        if let Err(e) = fs::write(&blob, &body) {
            return internal(e);
        }
    }
    let mut t = st.tables.lock().expect("tables lock");
    let entry = ImageEntry { image_id: format!("img-{:06}", t.images.len() + 1), sha256: sha, width, height };
    let line = format!("{} {} {} {}", entry.image_id, entry.sha256, entry.width, entry.height);
    if let Err(e) = st.append("images.log", &line) {
        return internal(e);
    }
    let id = entry.image_id.clone();
    t.images.push(entry);
    (StatusCode::CREATED, Json(json!({ "image_id": id, "width": width, "height": height }))).into_response()
}

async fn list_images(State(st): State<Arc<AppState>>) -> Response {
    let t = st.tables.lock().expect("tables lock");
    Json(json!(t.images)).into_response()
}

async fn get_image(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let sha = {
        let t = st.tables.lock().expect("tables lock");
        match t.images.iter().find(|e| e.image_id == id) {
            Some(e) => e.sha256.clone(),
            None => return error_response(StatusCode::NOT_FOUND, format!("unknown image {id}")),
        }
    };
    match fs::read(st.blob_path(&sha)) {
        Ok(bytes) => {
            let ct = if bytes.starts_with(b"P6") { "image/x-portable-pixmap" } else { "image/x-portable-graymap" };
            ([(header::CONTENT_TYPE, ct)], bytes).into_response()
        }
        Err(e) => internal(e),
    }
}

#[derive(Deserialize)]
struct SeedRequest {
    row: usize,
    col: usize,
    half_size: Option<usize>,
}

#[derive(Deserialize)]
struct JobRequest {
    image_id: String,
    seed: Option<SeedRequest>,
    iterations: Option<usize>,
    feature_mode: Option<String>,
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> std::result::Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| {
        let status = if e.is_data() { StatusCode::UNPROCESSABLE_ENTITY } else { StatusCode::BAD_REQUEST };
        error_response(status, e.to_string())
    })
}

async fn submit_job(State(st): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: JobRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let n = st.pipeline.config.work_size;
    let feature_mode = match req.feature_mode.as_deref().map(FeatureMode::parse).transpose() {
        Ok(m) => m,
        Err(e) => return error_response(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    };
    let requested = req.seed.map(|s| SeedSpec { center_row: s.row, center_col: s.col, half_size: s.half_size.unwrap_or(DEFAULT_HALF_SIZE) });
    let seed = match requested.or(st.pipeline.config.seed) {
        Some(s) => s.check_inside(n, n).map(|_| s),
        None => default_seed(n, n),
    };
    let seed = match seed {
        Ok(s) => s,
        Err(e) => return error_response(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    };
    let total = req.iterations.unwrap_or(st.pipeline.config.chan_vese.iterations);

    let (job_id, sha, completed) = {
        let mut t = st.tables.lock().expect("tables lock");
        let Some(sha) = t.images.iter().find(|e| e.image_id == req.image_id).map(|e| e.sha256.clone()) else {
            return error_response(StatusCode::NOT_FOUND, format!("unknown image {}", req.image_id));
        };
        let job_id = format!("job-{:06}", t.next_job);
        let ev = JobEvent {
            job_id: job_id.clone(),
            state: JobState::Queued,
            image_id: Some(req.image_id.clone()),
            seed: Some(seed),
            total: Some(total),
            error: None,
        };
        if let Err(e) = st.log_job(&ev) {
            return internal(e);
        }
        t.next_job += 1;
        let completed = Arc::new(AtomicUsize::new(0));
        t.job_order.push(job_id.clone());
        t.jobs.insert(
            job_id.clone(),
            Job {
                image_id: req.image_id.clone(),
                seed,
                state: JobState::Queued,
                completed: completed.clone(),
                total,
                result_json: None,
                result: None,
                snapshots: Vec::new(),
                error: None,
            },
        );
        (job_id, sha, completed)
    };

    let opts = RunOptions {
        seed: Some(seed),
        iterations: req.iterations,
        feature_mode,
        snapshot_every: Some(st.config.snapshot_every),
    };
    tokio::spawn(execute(st.clone(), job_id.clone(), req.image_id, sha, opts, completed));
    (StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))).into_response()
}

async fn execute(st: Arc<AppState>, job_id: String, image_id: String, sha: String, opts: RunOptions, completed: Arc<AtomicUsize>) {
    let _permit = st.workers.clone().acquire_owned().await.expect("worker semaphore stays open");
    set_state(&st, &job_id, JobState::Running, None);
    let worker = {
        let st = st.clone();
        let job_id = job_id.clone();
        tokio::task::spawn_blocking(move || -> Result<CaseResult> {
            let bytes = fs::read(st.blob_path(&sha))?;
            let res = st.pipeline.run_bytes_with(&image_id, &bytes, &opts, |k, _| completed.store(k, Ordering::Relaxed));
            persist_result(&st, &job_id, &res)?;
            Ok(res)
        })
    };
    match worker.await {
        Ok(Ok(res)) => finish(&st, &job_id, res),
        Ok(Err(e)) => set_state(&st, &job_id, JobState::Failed, Some(StageError { stage: "service".into(), message: e.to_string() })),
        Err(e) => set_state(&st, &job_id, JobState::Failed, Some(StageError { stage: "service".into(), message: e.to_string() })),
    }
}

fn persist_result(st: &AppState, job_id: &str, res: &CaseResult) -> Result<()> {
    let jdir = st.dir().join("jobs").join(job_id);
    fs::create_dir_all(&jdir)?;
    for (k, m) in res.snapshots.iter().enumerate() {
        fs::write(jdir.join(snapshot_name(k)), save_pgm(&m.to_gray()))?;
    }
    fs::write(jdir.join("result.json"), res.to_json())?;
    Ok(())
}

fn finish(st: &AppState, job_id: &str, res: CaseResult) {
    if let Some(err) = res.error.clone() {
        set_state(st, job_id, JobState::Failed, Some(err));
        let mut t = st.tables.lock().expect("tables lock");
        if let Some(job) = t.jobs.get_mut(job_id) {
            job.result = Some(Arc::new(res));
        }
        return;
    }
    let snapshots = res.snapshots.iter().map(|m| Arc::new(save_pgm(&m.to_gray()))).collect();
    let json = Arc::new(res.to_json());
    {
        let mut t = st.tables.lock().expect("tables lock");
        if let Some(job) = t.jobs.get_mut(job_id) {
            job.snapshots = snapshots;
            job.result_json = Some(json);
            job.result = Some(Arc::new(res));
            job.completed.store(job.total, Ordering::Relaxed);
        }
    }
    set_state(st, job_id, JobState::Done, None);
}

fn set_state(st: &AppState, job_id: &str, state: JobState, error: Option<StageError>) {
    let mut t = st.tables.lock().expect("tables lock");
    if let Some(job) = t.jobs.get_mut(job_id) {
        job.state = state;
        job.error = error.clone();
    }
    let ev = JobEvent { job_id: job_id.to_string(), state, image_id: None, seed: None, total: None, error };
    // A failed log write only costs restart fidelity for this job.
    let _ = st.log_job(&ev);
}

fn status_json(id: &str, job: &Job) -> Value {
    let completed = job.completed.load(Ordering::Relaxed).min(job.total);
    json!({
        "job_id": id,
        "image_id": job.image_id,
        "state": job.state,
        "progress": { "completed": completed, "total": job.total },
        "seed": {
            "center_row": job.seed.center_row,
            "center_col": job.seed.center_col,
            "half_size": job.seed.half_size,
            "rows": job.seed.rows(),
            "cols": job.seed.cols(),
        },
        "snapshot_count": job.snapshots.len(),
        "error": job.error,
    })
}

async fn list_jobs(State(st): State<Arc<AppState>>) -> Response {
    let t = st.tables.lock().expect("tables lock");
    let all: Vec<Value> = t.job_order.iter().map(|id| status_json(id, &t.jobs[id])).collect();
    Json(Value::Array(all)).into_response()
}

async fn job_status(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let t = st.tables.lock().expect("tables lock");
    match t.jobs.get(&id) {
        Some(job) => Json(status_json(&id, job)).into_response(),
        None => error_response(StatusCode::NOT_FOUND, format!("unknown job {id}")),
    }
}

async fn job_snapshot(State(st): State<Arc<AppState>>, UrlPath((id, k)): UrlPath<(String, usize)>) -> Response {
    let t = st.tables.lock().expect("tables lock");
    let Some(job) = t.jobs.get(&id) else {
        return error_response(StatusCode::NOT_FOUND, format!("unknown job {id}"));
    };
    match job.snapshots.get(k) {
        Some(bytes) => ([(header::CONTENT_TYPE, "image/x-portable-graymap")], bytes.as_ref().clone()).into_response(),
        None => error_response(StatusCode::NOT_FOUND, format!("job {id} has {} snapshots", job.snapshots.len())),
    }
}

async fn job_result(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let t = st.tables.lock().expect("tables lock");
    let Some(job) = t.jobs.get(&id) else {
        return error_response(StatusCode::NOT_FOUND, format!("unknown job {id}"));
    };
    match (&job.result_json, job.state) {
        (Some(body), JobState::Done) => ([(header::CONTENT_TYPE, "application/json")], body.as_ref().clone()).into_response(),
        (_, JobState::Failed) => {
            let err = job.error.clone().unwrap_or(StageError { stage: "service".into(), message: "failed".into() });
            (
                StatusCode::CONFLICT,
                Json(json!({ "error": err.to_string(), "state": job.state, "stage": err.stage, "message": err.message })),
            )
                .into_response()
        }
        (_, state) => (StatusCode::CONFLICT, Json(json!({ "error": "job has not finished", "state": state }))).into_response(),
    }
}

#[derive(Deserialize)]
struct ReviewRequest {
    image_id: String,
    clinician_label: Option<String>,
}

#[derive(Deserialize)]
struct ReviewQuery {
    image_id: Option<String>,
}

async fn post_review(State(st): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: ReviewRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let clinician_label = match req.clinician_label.as_deref().map(Label::parse).transpose() {
        Ok(l) => l,
        Err(e) => return error_response(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    };
    let mut t = st.tables.lock().expect("tables lock");
    if !t.images.iter().any(|e| e.image_id == req.image_id) {
        return error_response(StatusCode::NOT_FOUND, format!("unknown image {}", req.image_id));
    }
    let latest = t.job_order.iter().rev().find_map(|id| {
        let job = &t.jobs[id];
        (job.image_id == req.image_id && job.state == JobState::Done).then(|| (id.clone(), job.result.clone()))
    });
    let (job_id, result) = match latest {
        Some((id, res)) => (Some(id), res),
        None => (None, None),
    };
    let record = ReviewRecord {
        image_id: req.image_id,
        job_id,
        predicted_label: result.as_ref().and_then(|r| r.prediction),
        prediction_score: result.as_ref().and_then(|r| r.prediction_score),
        scores: result.map(|r| r.scores.clone()).unwrap_or_default(),
        clinician_label,
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true),
    };
    if let Err(e) = st.append("reviews.log", &serde_json::to_string(&record).expect("review serializes")) {
        return internal(e);
    }
    t.reviews.push(record.clone());
    (StatusCode::CREATED, Json(record)).into_response()
}

/// All review records, oldest first; the newest record per image is flagged
/// `current`.
async fn list_reviews(State(st): State<Arc<AppState>>, Query(q): Query<ReviewQuery>) -> Response {
    let t = st.tables.lock().expect("tables lock");
    let mut latest: HashMap<&str, usize> = HashMap::new();
    for (i, r) in t.reviews.iter().enumerate() {
        latest.insert(r.image_id.as_str(), i);
    }
    let out: Vec<Value> = t
        .reviews
        .iter()
        .enumerate()
        .filter(|(_, r)| q.image_id.as_deref().is_none_or(|id| id == r.image_id))
        .map(|(i, r)| {
            let mut v = serde_json::to_value(r).expect("review serializes");
            v["current"] = json!(latest[r.image_id.as_str()] == i);
            v
        })
        .collect();
    Json(Value::Array(out)).into_response()
}
