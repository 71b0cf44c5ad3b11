use std::collections::BTreeMap;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response as HttpResponse};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use jndloc_core::imaging::{frame_file_name, CodecId, DistortionLevel};
use jndloc_core::protocol::{Calibration, GroundTruth, Response, TrainingOutcome, WorkerState};
use jndloc_core::qc::{self, Manifest, QcReport, ResponseLog};
use jndloc_core::study::{self, EngineError, HitCounters, QualificationItem, QualificationReply};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::{AppState, EXPORT_DIR};

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/session", post(create_session))
        .route("/v1/qualification/next", get(next_qualification))
        .route("/v1/qualification/level", post(qualification_level))
        .route("/v1/qualification/response", post(qualification_response))
        .route("/v1/hit/next", get(next_hit))
        .route("/v1/hit/{hit_id}/response", post(hit_response))
        .route("/v1/frame/{image_ref}/{d}", get(frame))
        .route("/v1/gold/{image_ref}/heatmap", get(gold_heatmap))
        .route("/v1/admin/stats", get(admin_stats))
        .route("/v1/admin/export", get(admin_export))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn unauthorized(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let (status, code) = match &e {
            EngineError::Invalid(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
            EngineError::Forbidden(_) => (StatusCode::FORBIDDEN, "forbidden"),
            EngineError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            EngineError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            EngineError::NoHitAvailable(_) => (StatusCode::NOT_FOUND, "no_hit_available"),
            EngineError::Log(_) => (StatusCode::INTERNAL_SERVER_ERROR, "log"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> HttpResponse {
        (
            self.status,
            Json(json!({ "error": self.code, "message": self.message })),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Parses a JSON body; any syntax or schema problem is a 422.
fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", e.to_string()))
}

fn bearer(headers: &HeaderMap) -> ApiResult<&str> {
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .ok_or_else(|| ApiError::unauthorized("missing bearer token"))
}

pub fn token_hash(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

/// Resolves the session's worker; expired or unknown tokens are refused.
fn session_worker(state: &AppState, headers: &HeaderMap, now: DateTime<Utc>) -> ApiResult<String> {
    let hash = token_hash(bearer(headers)?);
    state.with_reader(|w| {
        w.engine()
            .session(&hash, now)
            .map(|s| s.worker_id.clone())
            .map_err(|e| ApiError::unauthorized(e.to_string()))
    })
}

fn check_admin(state: &AppState, headers: &HeaderMap) -> ApiResult<()> {
    let token = bearer(headers)?;
    let expected = token_hash(&state.admin_token);
    if state.admin_token.is_empty() || token_hash(token) != expected {
        return Err(ApiError::unauthorized("admin credential required"));
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRequest {
    pub worker_id: String,
    pub ppi: f64,
    #[serde(default)]
    pub confirmed_distance: bool,
    #[serde(default)]
    pub viewport: Option<[u32; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionReply {
    pub token: String,
    pub worker_id: String,
    pub state: WorkerState,
    pub expires_at: DateTime<Utc>,
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<SessionReply>)> {
    let req: SessionRequest = parse_body(&body)?;
    let mut raw = [0u8; 32];
    rand::rng().fill_bytes(&mut raw);
    let token = hex::encode(raw);
    let now = state.now();
    let calibration = Calibration {
        ppi: req.ppi,
        confirmed_distance: req.confirmed_distance,
    };
    let (info, worker_state) = state.with_writer(|w| -> Result<_, EngineError> {
        let d = w
            .engine()
            .create_session(&req.worker_id, calibration, req.viewport, &token_hash(&token), now)?;
        let info = w.commit(d)?;
        let ws = w.engine().worker(&req.worker_id).map(|r| r.state).unwrap_or(WorkerState::New);
        Ok((info, ws))
    })?;
    Ok((
        StatusCode::CREATED,
        Json(SessionReply {
            token,
            worker_id: info.worker_id,
            state: worker_state,
            expires_at: info.expires_at,
        }),
    ))
}

fn frame_url_template(image_ref: &str) -> String {
    format!("/v1/frame/{image_ref}/{{d}}")
}

fn heatmap_url(image_ref: &str) -> String {
    format!("/v1/gold/{image_ref}/heatmap")
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QualificationItemWire {
    #[serde(flatten)]
    pub item: QualificationItem,
    pub frame_url: String,
}

async fn next_qualification(State(state): State<AppState>, headers: HeaderMap) -> ApiResult<Json<QualificationItemWire>> {
    let now = state.now();
    let worker = session_worker(&state, &headers, now)?;
    let item = state.with_writer(|w| {
        let d = w.engine().next_qualification_item(&worker, now)?;
        w.commit(d)
    })?;
    Ok(Json(QualificationItemWire {
        frame_url: frame_url_template(&item.image_ref),
        item,
    }))
}

#[derive(Debug, Deserialize)]
struct LevelRequest {
    level: i64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LevelReply {
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heatmap_url: Option<String>,
}

/// Training level gate: clicks are requested only after acceptance.
async fn qualification_level(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<LevelReply>> {
    let now = state.now();
    let worker = session_worker(&state, &headers, now)?;
    let req: LevelRequest = parse_body(&body)?;
    let level = DistortionLevel::new(req.level)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", e.to_string()))?;
    let (gate, image) = state.with_reader(|w| -> Result<_, EngineError> {
        let e = w.engine();
        let gate = e.check_training_level(&worker, level)?;
        let pos = e
            .worker(&worker)
            .map(|r| r.qualification.training_passed as usize)
            .unwrap_or(0);
        let image = e.definition().catalog.training.get(pos).cloned().unwrap_or_default();
        Ok((gate, image))
    })?;
    Ok(Json(match gate {
        Ok(()) => LevelReply {
            accepted: true,
            ground_truth: None,
            heatmap_url: None,
        },
        Err(gt) => LevelReply {
            accepted: false,
            ground_truth: Some(gt),
            heatmap_url: Some(heatmap_url(&image)),
        },
    }))
}

async fn qualification_response(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<serde_json::Value>> {
    let now = state.now();
    let worker = session_worker(&state, &headers, now)?;
    let resp: Response = parse_body(&body)?;
    let reply = state.with_writer(|w| {
        let d = w.engine().submit_qualification(&worker, &resp, now)?;
        w.commit(d)
    })?;
    let mut value = serde_json::to_value(&reply).expect("serializable");
    if let QualificationReply::Training {
        outcome: TrainingOutcome::RetryLevel { .. } | TrainingOutcome::RetryClicks { .. },
    } = reply
    {
        value["heatmap_url"] = json!(heatmap_url(&resp.image_ref));
    }
    Ok(Json(value))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HitItemWire {
    pub image_ref: String,
    pub codec: CodecId,
    pub width: u32,
    pub height: u32,
    pub frame_url: String,
}

/// HIT as served to a client; the gold item is not marked.
#[derive(Debug, Serialize, Deserialize)]
pub struct HitDescriptor {
    pub hit_id: String,
    pub items: Vec<HitItemWire>,
    pub answered: Vec<String>,
}

async fn next_hit(State(state): State<AppState>, headers: HeaderMap) -> ApiResult<Json<HitDescriptor>> {
    let now = state.now();
    let worker = session_worker(&state, &headers, now)?;
    let (hit, answered) = state.with_writer(|w| -> Result<_, EngineError> {
        let d = w.engine().next_hit(&worker, now)?;
        let hit = w.commit(d)?;
        let answered = w
            .engine()
            .state()
            .open
            .get(&worker)
            .map(|o| o.answered.iter().cloned().collect())
            .unwrap_or_default();
        Ok((hit, answered))
    })?;
    let items = hit
        .items
        .iter()
        .map(|i| {
            let info = &state.def.catalog.images[&i.image_ref];
            HitItemWire {
                image_ref: i.image_ref.clone(),
                codec: i.codec,
                width: info.width,
                height: info.height,
                frame_url: frame_url_template(&i.image_ref),
            }
        })
        .collect();
    Ok(Json(HitDescriptor {
        hit_id: hit.hit_id,
        items,
        answered,
    }))
}

async fn hit_response(
    State(state): State<AppState>,
    Path(hit_id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<study::HitAck>> {
    let now = state.now();
    let worker = session_worker(&state, &headers, now)?;
    let resp: Response = parse_body(&body)?;
    let ack = state.with_writer(|w| {
        let d = w.engine().submit_hit_response(&worker, &hit_id, &resp, now)?;
        w.commit(d)
    })?;
    Ok(Json(ack))
}

/// Lossless PNG of the decoded frame; level 0 is the source.
async fn frame(State(state): State<AppState>, Path((image_ref, d)): Path<(String, String)>) -> ApiResult<HttpResponse> {
    let level = d
        .parse::<i64>()
        .ok()
        .and_then(|d| DistortionLevel::new(d).ok())
        .ok_or_else(|| ApiError::not_found(format!("no level {d}")))?;
    let info = state
        .def
        .catalog
        .images
        .get(&image_ref)
        .ok_or_else(|| ApiError::not_found(format!("unknown image {image_ref}")))?;
    let path = state.cache.root().join(&info.ladder).join(frame_file_name(level));
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|_| ApiError::not_found(format!("frame {image_ref}/{d} not in cache")))?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png"),
            (header::CACHE_CONTROL, "public, max-age=31536000, immutable"),
        ],
        bytes,
    )
        .into_response())
}

/// Blend weight field of a gold item as a 16-bit PNG.
async fn gold_heatmap(State(state): State<AppState>, Path(image_ref): Path<String>) -> ApiResult<HttpResponse> {
    let spec = state
        .def
        .catalog
        .gold_specs
        .get(&image_ref)
        .ok_or_else(|| ApiError::not_found(format!("no gold item {image_ref}")))?;
    let png = spec
        .weight_field()
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "gold", e.to_string()))?
        .to_map()
        .to_png16()
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "png", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatsReply {
    pub events: u64,
    pub workers: BTreeMap<WorkerState, usize>,
    pub quiz_failed: usize,
    pub target_responses: u32,
    pub assignment_overshoot: u32,
    pub hits: BTreeMap<String, HitCounters>,
    /// Responses per study image (gold items excluded).
    pub image_responses: BTreeMap<String, u32>,
    pub report: QcReport,
}

fn current_log(state: &AppState) -> ApiResult<ResponseLog> {
    // Holding the read lock keeps the file at a command boundary.
    state.with_reader(|_| {
        study::read_events(&state.events_path())
            .map(|events| ResponseLog::from_events(&events))
            .map_err(ApiError::from)
    })
}

fn qc_error(e: qc::QcError) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "qc", e.to_string())
}

async fn admin_stats(State(state): State<AppState>, headers: HeaderMap) -> ApiResult<Json<StatsReply>> {
    check_admin(&state, &headers)?;
    let mut log = current_log(&state)?;
    let report = qc::run_pipeline(&mut log, &state.def.config.qc()).map_err(qc_error)?;
    let reply = state.with_reader(|w| {
        let s = w.engine().state();
        let mut workers = BTreeMap::new();
        for r in s.workers.values() {
            *workers.entry(r.state).or_insert(0) += 1;
        }
        StatsReply {
            events: s.events_applied,
            workers,
            quiz_failed: s.workers.values().filter(|r| r.qualification.quiz_failed()).count(),
            target_responses: state.def.config.target_responses,
            assignment_overshoot: state.def.config.assignment_overshoot,
            hits: s.hits.clone(),
            image_responses: s
                .image_responses
                .iter()
                .filter(|(id, _)| state.def.catalog.images.get(*id).is_some_and(|i| !i.gold))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
            report,
        }
    });
    Ok(Json(reply))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExportReply {
    pub report: QcReport,
    pub manifest: Option<Manifest>,
}

/// Runs the QC pipeline on the current log and exports under the data
/// directory when any image survives.
async fn admin_export(State(state): State<AppState>, headers: HeaderMap) -> ApiResult<Json<ExportReply>> {
    check_admin(&state, &headers)?;
    let mut log = current_log(&state)?;
    let params = state.def.config.qc();
    let report = qc::run_pipeline(&mut log, &params).map_err(qc_error)?;
    let study_ids: Vec<String> = state
        .def
        .catalog
        .images
        .iter()
        .filter(|(_, i)| !i.gold)
        .map(|(id, _)| id.clone())
        .collect();
    let agg = qc::aggregate(&log, &study_ids);
    let manifest = if agg.annotations.is_empty() {
        None
    } else {
        let dims: BTreeMap<String, (u32, u32)> = state
            .def
            .catalog
            .images
            .iter()
            .map(|(id, i)| (id.clone(), (i.width, i.height)))
            .collect();
        let out = state.data_dir.join(EXPORT_DIR);
        let st = state.clone();
        let report_copy = report.clone();
        let manifest = tokio::task::spawn_blocking(move || {
            qc::export_dataset(&agg, &dims, st.def.config.sigma_blur, Some(&report_copy), &out)
        })
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "export", e.to_string()))?
        .map_err(qc_error)?;
        Some(manifest)
    };
    Ok(Json(ExportReply { report, manifest }))
}
