//! HTTP façade over the engine for the annotation tool.
//!
//! Resources get sequential ids in request order (`v1` videos, `j1` jobs,
//! `m1` masks, `p1` probability fields), so the server state after a call
//! log is the same on every replay. A flow is addressed by the id of the job
//! that fitted it.

pub mod error;
pub mod jobs;
mod routes;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::DefaultBodyLimit;
use axum::routing::{get, post};
use axum::Router;
use inrprop::feature_field::FeatureVolume;
use inrprop::flow_field::FlowFitConfig;
use inrprop::maskops::{BinaryMask, InteriorLevel, ProbabilityField};
use inrprop::matching::MatchResult;
use inrprop::{DisplacementField, FeatureField};
use tokio::sync::Semaphore;

pub use error::{ApiError, ApiResult};
pub use jobs::{JobKind, JobRecord, JobRegistry, JobState};

/// PGM bodies, 8-bit masks and 16-bit probability fields.
pub const PGM_CONTENT_TYPE: &str = "image/x-portable-graymap";
/// FVOL upload bodies.
pub const FVOL_CONTENT_TYPE: &str = "application/x-fvol";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Where fitted fields and displacement checkpoints are written.
    pub data_dir: PathBuf,
    /// Flow fits allowed to run at once.
    pub flow_workers: usize,
    pub max_body_bytes: usize,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            data_dir: data_dir.into(),
            flow_workers: 2,
            max_body_bytes: 512 << 20,
        }
    }
}

struct Video {
    volume: Arc<FeatureVolume>,
    field: Option<Arc<FeatureField>>,
    /// Most recent fit job; flows wait for it.
    fit_job: Option<String>,
    /// Held for the duration of a fit, so fits of one video run in order.
    fit_lock: Arc<tokio::sync::Mutex<()>>,
}

#[derive(Clone)]
struct Flow {
    disp: Arc<DisplacementField>,
    src: Arc<FeatureField>,
    tgt: Arc<FeatureField>,
    cfg: FlowFitConfig,
}

/// Everything of a mask propagation that does not depend on `tau`.
#[derive(Clone)]
struct CachedField {
    probability_ref: String,
    probability: Arc<ProbabilityField>,
    matches: Vec<MatchResult>,
    interior_level: InteriorLevel,
    interior_count: usize,
}

struct Shared {
    cfg: ServiceConfig,
    jobs: JobRegistry,
    videos: Mutex<Vec<Video>>,
    flows: Mutex<HashMap<String, Flow>>,
    masks: Mutex<Vec<Arc<BinaryMask>>>,
    probabilities: Mutex<Vec<Arc<ProbabilityField>>>,
    field_cache: Mutex<HashMap<String, CachedField>>,
    flow_slots: Arc<Semaphore>,
}

/// Shared server state; cheap to clone.
#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    pub fn new(cfg: ServiceConfig) -> Self {
        AppState(Arc::new(Shared {
            flow_slots: Arc::new(Semaphore::new(cfg.flow_workers.max(1))),
            cfg,
            jobs: JobRegistry::default(),
            videos: Mutex::default(),
            flows: Mutex::default(),
            masks: Mutex::default(),
            probabilities: Mutex::default(),
            field_cache: Mutex::default(),
        }))
    }

    pub fn job(&self, id: &str) -> Option<JobRecord> {
        self.0.jobs.get(id)
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.0.cfg.max_body_bytes;
    Router::new()
        .route("/videos", post(routes::upload_video))
        .route("/videos/{id}", get(routes::video_info))
        .route("/videos/{id}/fit", post(routes::fit_video))
        .route("/jobs/{id}", get(routes::job_status))
        .route("/flows", post(routes::submit_flow))
        .route("/masks", post(routes::upload_mask))
        .route("/masks/{id}", get(routes::download_mask))
        .route("/probabilities/{id}", get(routes::download_probability))
        .route("/propagate/points", post(routes::propagate_points))
        .route("/propagate/mask", post(routes::propagate_mask))
        .route("/rethreshold", post(routes::rethreshold))
        .route("/dice", post(routes::dice))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}
