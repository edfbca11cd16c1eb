use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::header;
use axum::response::IntoResponse;
use axum::Json;
use inrprop::feature_field::{fit_feature_field_with, Downsampler, FeatureSource, FieldFitConfig};
use inrprop::flow_field::{fit_displacement_with, FlowFitConfig, Pair};
use inrprop::io::{self, AnnotationDoc, FrameRef, MaskOutputs, PropagationDoc, PropagationMode, SourceRef};
use inrprop::maskops::{self, BinaryMask, InteriorConfig, KdeConfig};
use inrprop::matching::{match_points, MatchConfig};
use inrprop::metrics;
use inrprop::{Error, Stage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{ApiError, ApiResult};
use crate::jobs::JobKind;
use crate::{AppState, CachedField, Flow, JobState, Shared, Video, PGM_CONTENT_TYPE};

/// Parses a JSON body; an empty body reads as `{}`.
fn parse<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    let body = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    io::from_json(body).map_err(ApiError::from)
}

async fn blocking<R: Send + 'static>(f: impl FnOnce() -> R + Send + 'static) -> ApiResult<R> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))
}

fn video_index(id: &str) -> Option<usize> {
    id.strip_prefix('v')?.parse::<usize>().ok()?.checked_sub(1)
}

fn push<T>(list: &std::sync::Mutex<Vec<Arc<T>>>, prefix: char, item: T) -> String {
    let mut list = list.lock().unwrap();
    list.push(Arc::new(item));
    format!("{prefix}{}", list.len())
}

fn lookup<T>(list: &std::sync::Mutex<Vec<Arc<T>>>, prefix: char, id: &str, what: &str) -> ApiResult<Arc<T>> {
    let i = id
        .strip_prefix(prefix)
        .and_then(|n| n.parse::<usize>().ok())
        .and_then(|n| n.checked_sub(1));
    let list = list.lock().unwrap();
    i.and_then(|i| list.get(i))
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("{what} `{id}`")))
}

// ---------------------------------------------------------------- videos

#[derive(Serialize)]
pub struct VideoInfo {
    video_id: String,
    frames: usize,
    height: usize,
    width: usize,
    dim: usize,
    source_tag: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit_job: Option<String>,
    fitted: bool,
    /// Vectors renormalized on upload; only reported by the upload call.
    #[serde(skip_serializing_if = "Option::is_none")]
    renormalized: Option<usize>,
}

fn info(id: String, v: &Video) -> VideoInfo {
    let (frames, height, width, dim) = v.volume.dims();
    VideoInfo {
        video_id: id,
        frames,
        height,
        width,
        dim,
        source_tag: v.volume.source_tag().to_owned(),
        fit_job: v.fit_job.clone(),
        fitted: v.field.is_some(),
        renormalized: None,
    }
}

pub async fn upload_video(State(s): State<AppState>, body: Bytes) -> ApiResult<Json<VideoInfo>> {
    let loaded = blocking(move || io::decode_fvol(&body)).await??;
    let mut videos = s.0.videos.lock().unwrap();
    videos.push(Video {
        volume: Arc::new(loaded.volume),
        field: None,
        fit_job: None,
        fit_lock: Arc::default(),
    });
    let id = format!("v{}", videos.len());
    let mut out = info(id, videos.last().expect("just pushed"));
    out.renormalized = Some(loaded.renormalized);
    Ok(Json(out))
}

pub async fn video_info(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<VideoInfo>> {
    let videos = s.0.videos.lock().unwrap();
    let v = video_index(&id)
        .and_then(|i| videos.get(i))
        .ok_or_else(|| ApiError::not_found(format!("video `{id}`")))?;
    Ok(Json(info(id, v)))
}

#[derive(Serialize)]
pub struct Submitted {
    job_id: String,
}

pub async fn fit_video(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Submitted>> {
    let cfg: FieldFitConfig = parse(&body)?;
    cfg.validate()?;
    let (volume, lock, job) = {
        let mut videos = s.0.videos.lock().unwrap();
        let v = video_index(&id)
            .and_then(|i| videos.get_mut(i))
            .ok_or_else(|| ApiError::not_found(format!("video `{id}`")))?;
        // reject configs that cannot fit this volume before queueing a job
        let grid = v.volume.grid();
        Downsampler::<f64>::for_resolution(cfg.hr_canvas(grid), grid)?;
        cfg.net_config(v.volume.dim()).validate()?;
        let job = s.0.jobs.submit(JobKind::FitFeatures);
        v.fit_job = Some(job.clone());
        (v.volume.clone(), v.fit_lock.clone(), job)
    };
    let shared = s.0.clone();
    let job_id = job.clone();
    tokio::spawn(async move {
        let _turn = lock.lock_owned().await;
        shared.jobs.start(&job);
        let worker = shared.clone();
        let (video, j) = (id.clone(), job.clone());
        let outcome = tokio::task::spawn_blocking(move || {
            let fit = fit_feature_field_with::<f64>(&volume, &cfg, |p| {
                worker.jobs.progress(&j, p.epoch as f64 / p.epochs as f64)
            })
            .map_err(|e| e.at_stage(Stage::FieldFit))?;
            let field = fit.field.with_video_id(video.clone());
            let path = worker.cfg.data_dir.join(format!("{video}-{j}.ffld"));
            io::write_feature_field(&field, &path)?;
            Ok::<_, Error>((field, path))
        })
        .await;
        match outcome {
            Ok(Ok((field, path))) => {
                let mut videos = shared.videos.lock().unwrap();
                if let Some(v) = video_index(&id).and_then(|i| videos.get_mut(i)) {
                    v.field = Some(Arc::new(field));
                }
                shared.jobs.finish(&job, path.display().to_string());
            }
            Ok(Err(e)) => shared.jobs.fail(&job, e.to_string()),
            Err(e) => shared.jobs.fail(&job, format!("worker failed: {e}")),
        }
    });
    Ok(Json(Submitted { job_id }))
}

pub async fn job_status(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<crate::JobRecord>> {
    s.job(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("job `{id}`")))
}

// ---------------------------------------------------------------- flows

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowRequest {
    /// `video:frame`.
    src: String,
    tgt: String,
    #[serde(default)]
    cfg: FlowFitConfig,
}

fn frame_ref(s: &str, field: &str) -> ApiResult<(String, usize)> {
    s.rsplit_once(':')
        .and_then(|(v, t)| Some((v.to_owned(), t.parse().ok()?)))
        .ok_or_else(|| Error::schema(field, format!("expected `video:frame`, got `{s}`")).into())
}

/// The video's fitted field, provided its latest fit job has finished.
fn fitted_field(shared: &Shared, id: &str) -> ApiResult<Arc<inrprop::FeatureField>> {
    let videos = shared.videos.lock().unwrap();
    let v = video_index(id)
        .and_then(|i| videos.get(i))
        .ok_or_else(|| ApiError::not_found(format!("video `{id}`")))?;
    let job = v
        .fit_job
        .as_deref()
        .ok_or_else(|| ApiError::conflict(format!("video `{id}` has not been fitted")))?;
    let state = shared.jobs.get(job).map(|j| j.state);
    match (state, &v.field) {
        (Some(JobState::Done), Some(f)) => Ok(f.clone()),
        (Some(JobState::Failed), _) => Err(ApiError::conflict(format!("fit job {job} of video `{id}` failed"))),
        _ => Err(ApiError::conflict(format!("fit job {job} of video `{id}` is not done"))),
    }
}

pub async fn submit_flow(State(s): State<AppState>, body: Bytes) -> ApiResult<Json<Submitted>> {
    let req: FlowRequest = parse(&body)?;
    req.cfg.validate()?;
    let (sv, st) = frame_ref(&req.src, "src")?;
    let (tv, tt) = frame_ref(&req.tgt, "tgt")?;
    let src = fitted_field(&s.0, &sv)?;
    let tgt = fitted_field(&s.0, &tv)?;
    Pair::new(&*src, st, &*tgt, tt).validate::<f64>()?;

    let job = s.0.jobs.submit(JobKind::FitFlow);
    let shared = s.0.clone();
    let job_id = job.clone();
    let cfg = req.cfg;
    tokio::spawn(async move {
        let Ok(_slot) = shared.flow_slots.clone().acquire_owned().await else {
            return;
        };
        shared.jobs.start(&job);
        let worker = shared.clone();
        let j = job.clone();
        let (a, b) = (src.clone(), tgt.clone());
        let outcome = tokio::task::spawn_blocking(move || {
            let pair = Pair::new(&*a, st, &*b, tt);
            let epochs = cfg.epochs as f64;
            let disp = fit_displacement_with(pair, &cfg, |epoch, _| worker.jobs.progress(&j, epoch as f64 / epochs))?;
            let path = worker.cfg.data_dir.join(format!("{j}.dfld"));
            io::write_displacement(&disp, &path)?;
            Ok::<_, Error>((disp, path))
        })
        .await;
        match outcome {
            Ok(Ok((disp, path))) => {
                let flow = Flow {
                    disp: Arc::new(disp),
                    src,
                    tgt,
                    cfg,
                };
                shared.flows.lock().unwrap().insert(job.clone(), flow);
                shared.jobs.finish(&job, path.display().to_string());
            }
            Ok(Err(e)) => shared.jobs.fail(&job, e.to_string()),
            Err(e) => shared.jobs.fail(&job, format!("worker failed: {e}")),
        }
    });
    Ok(Json(Submitted { job_id }))
}

fn finished_flow(shared: &Shared, id: &str) -> ApiResult<Flow> {
    let job = shared
        .jobs
        .get(id)
        .filter(|j| j.kind == JobKind::FitFlow)
        .ok_or_else(|| ApiError::not_found(format!("flow `{id}`")))?;
    match job.state {
        JobState::Done => Ok(shared.flows.lock().unwrap()[id].clone()),
        JobState::Failed => Err(ApiError::conflict(format!("flow job {id} failed"))),
        _ => Err(ApiError::conflict(format!("flow job {id} is not done"))),
    }
}

// ---------------------------------------------------------------- masks

#[derive(Serialize)]
pub struct MaskInfo {
    mask_ref: String,
    width: usize,
    height: usize,
    foreground_count: usize,
}

fn store_mask(shared: &Shared, mask: BinaryMask) -> MaskInfo {
    let (width, height, foreground_count) = (mask.width(), mask.height(), mask.count());
    MaskInfo {
        mask_ref: push(&shared.masks, 'm', mask),
        width,
        height,
        foreground_count,
    }
}

pub async fn upload_mask(State(s): State<AppState>, body: Bytes) -> ApiResult<Json<MaskInfo>> {
    let mask = io::decode_mask_pgm(&body)?;
    Ok(Json(store_mask(&s.0, mask)))
}

pub async fn download_mask(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let m = lookup(&s.0.masks, 'm', &id, "mask")?;
    Ok(([(header::CONTENT_TYPE, PGM_CONTENT_TYPE)], io::encode_mask_pgm(&m)))
}

pub async fn download_probability(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let p = lookup(&s.0.probabilities, 'p', &id, "probability field")?;
    Ok(([(header::CONTENT_TYPE, PGM_CONTENT_TYPE)], io::encode_probability_pgm(&p)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DiceRequest {
    a: String,
    b: String,
}

pub async fn dice(State(s): State<AppState>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: DiceRequest = parse(&body)?;
    let a = lookup(&s.0.masks, 'm', &req.a, "mask")?;
    let b = lookup(&s.0.masks, 'm', &req.b, "mask")?;
    Ok(Json(json!({ "dice": metrics::dice(&a, &b)? })))
}

// ---------------------------------------------------------------- propagation

fn check_annotation(ann: &AnnotationDoc, flow: &Flow) -> ApiResult<()> {
    ann.validate()?;
    let m = &flow.disp.meta;
    if ann.video_id != m.src_video || ann.frame != m.src_t {
        return Err(ApiError::unprocessable(format!(
            "annotation is on frame {} of `{}` but the flow starts at frame {} of `{}`",
            ann.frame, ann.video_id, m.src_t, m.src_video
        )));
    }
    if ann.canvas != flow.src.canvas() {
        return Err(ApiError::unprocessable("annotation canvas differs from the field canvas"));
    }
    Ok(())
}

fn document(
    ann: &AnnotationDoc,
    flow: &Flow,
    configs: Map<String, Value>,
    mode: PropagationMode,
    results: Vec<inrprop::matching::MatchResult>,
    mask: Option<MaskOutputs>,
) -> PropagationDoc {
    PropagationDoc {
        engine_version: io::ENGINE_VERSION.to_owned(),
        seed: Some(flow.cfg.seed),
        configs: Some(configs),
        source: SourceRef {
            video_id: ann.video_id.clone(),
            frame: ann.frame,
            path: None,
        },
        target: FrameRef {
            video_id: flow.tgt.video_id().to_owned(),
            frame: flow.disp.meta.tgt_t,
        },
        mode,
        results,
        mask,
        extra: Map::new(),
    }
}

fn echo(pairs: &[(&str, Value)]) -> Map<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PointsRequest {
    annotation: AnnotationDoc,
    flow: String,
    #[serde(default)]
    matching: MatchConfig,
}

pub async fn propagate_points(State(s): State<AppState>, body: Bytes) -> ApiResult<Json<PropagationDoc>> {
    let req: PointsRequest = parse(&body)?;
    req.matching.validate()?;
    let flow = finished_flow(&s.0, &req.flow)?;
    check_annotation(&req.annotation, &flow)?;
    let points = req.annotation.point_coords();
    if points.is_empty() {
        return Err(ApiError::unprocessable("annotation has no points"));
    }
    let (f, cfg) = (flow.clone(), req.matching);
    let results = blocking(move || {
        let pair = Pair::new(&*f.src, f.disp.meta.src_t, &*f.tgt, f.disp.meta.tgt_t);
        match_points(&points, &pair, &f.disp, &cfg).map_err(|e| e.at_stage(Stage::Matching))
    })
    .await??;
    let configs = echo(&[("flow", json!(flow.cfg)), ("matching", json!(req.matching))]);
    Ok(Json(document(&req.annotation, &flow, configs, PropagationMode::Points, results, None)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskRequest {
    annotation: AnnotationDoc,
    flow: String,
    #[serde(default)]
    matching: MatchConfig,
    #[serde(default)]
    interior: InteriorConfig,
    #[serde(default)]
    kde: KdeConfig,
}

/// Cache key: everything that shapes the probability field, `tau` excluded.
fn field_key(req: &MaskRequest, mask: &BinaryMask) -> String {
    let mut h = Sha256::new();
    h.update(io::to_json(&req.annotation));
    h.update((mask.width() as u64).to_le_bytes());
    h.update((mask.height() as u64).to_le_bytes());
    h.update(mask.bits().iter().map(|&b| b as u8).collect::<Vec<_>>());
    h.update(req.flow.as_bytes());
    h.update(io::to_json(&req.matching));
    h.update(io::to_json(&req.interior));
    h.update(req.kde.sigma_kde.to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub async fn propagate_mask(State(s): State<AppState>, body: Bytes) -> ApiResult<Json<PropagationDoc>> {
    let req: MaskRequest = parse(&body)?;
    req.matching.validate()?;
    req.kde.validate()?;
    let flow = finished_flow(&s.0, &req.flow)?;
    check_annotation(&req.annotation, &flow)?;
    let mask_id = req
        .annotation
        .mask_ref
        .as_deref()
        .ok_or_else(|| ApiError::unprocessable("annotation has no mask_ref"))?;
    let source = lookup(&s.0.masks, 'm', mask_id, "mask")?;
    if source.canvas() != req.annotation.canvas {
        return Err(ApiError::unprocessable("mask size differs from the annotation canvas"));
    }

    let key = field_key(&req, &source);
    let hit = s.0.field_cache.lock().unwrap().get(&key).cloned();
    let cached = match hit {
        Some(c) => c,
        None => {
            let (f, m, cfg) = (flow.clone(), source.clone(), (req.matching, req.interior, req.kde));
            let prop = blocking(move || {
                let pair = Pair::new(&*f.src, f.disp.meta.src_t, &*f.tgt, f.disp.meta.tgt_t);
                maskops::propagate_mask(&m, &pair, &f.disp, &cfg.0, &cfg.1, &cfg.2)
            })
            .await??;
            let probability = Arc::new(prop.probability);
            let entry = CachedField {
                probability_ref: push(&s.0.probabilities, 'p', (*probability).clone()),
                probability,
                matches: prop.matches,
                interior_level: prop.interior.level,
                interior_count: prop.interior.points.len(),
            };
            s.0.field_cache.lock().unwrap().insert(key, entry.clone());
            entry
        }
    };
    let mask = store_mask(&s.0, cached.probability.threshold(req.kde.tau));
    let outputs = MaskOutputs {
        mask_ref: mask.mask_ref,
        probability_ref: Some(cached.probability_ref),
        interior_level: cached.interior_level,
        interior_count: cached.interior_count,
        foreground_count: mask.foreground_count,
    };
    let configs = echo(&[
        ("flow", json!(flow.cfg)),
        ("matching", json!(req.matching)),
        ("interior", json!(req.interior)),
        ("kde", json!(req.kde)),
    ]);
    Ok(Json(document(&req.annotation, &flow, configs, PropagationMode::Mask, cached.matches, Some(outputs))))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RethresholdRequest {
    probability: String,
    tau: f64,
}

pub async fn rethreshold(State(s): State<AppState>, body: Bytes) -> ApiResult<Json<MaskInfo>> {
    let req: RethresholdRequest = parse(&body)?;
    maskops::validate_tau(req.tau)?;
    let p = lookup(&s.0.probabilities, 'p', &req.probability, "probability field")?;
    Ok(Json(store_mask(&s.0, p.threshold(req.tau))))
}
