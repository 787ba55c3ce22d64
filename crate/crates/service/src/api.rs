//! HTTP routes.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::{Deserialize, Serialize};
use triage_core::imaging::encode_png;

use crate::config::ServiceConfig;
use crate::error::{ApiError, ServiceError};
use crate::pipeline::{self, ModelIdentity, Models};
use crate::store::{AnalysisResult, ResultStore, CAM_FILE, OVERLAY_FILE, UPLOAD_STEM};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
pub const DEFAULT_HISTORY_LIMIT: usize = 20;
/// Multipart framing allowance on top of the upload limit.
const MULTIPART_SLACK: usize = 64 * 1024;

pub struct AppState {
    pub config: ServiceConfig,
    pub models: Arc<Models>,
    pub store: Arc<ResultStore>,
    /// One lock per in-flight idempotency key.
    key_locks: std::sync::Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl AppState {
    /// Loads both checkpoints and opens the store; fails with a named error
    /// when either checkpoint is missing.
    pub fn load(config: ServiceConfig) -> Result<Self, ServiceError> {
        let models = Models::load(&config.model_dir)?;
        let store = ResultStore::open(&config.store_dir, config.retention)?;
        Ok(Self::new(config, Arc::new(models), Arc::new(store)))
    }

    pub fn new(config: ServiceConfig, models: Arc<Models>, store: Arc<ResultStore>) -> Self {
        Self {
            config,
            models,
            store,
            key_locks: Default::default(),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_upload_bytes.saturating_add(MULTIPART_SLACK);
    Router::new()
        .route("/api/v1/analyze", post(analyze))
        .route("/api/v1/results/{id}", get(get_result))
        .route("/api/v1/history", get(history))
        .route("/api/v1/artifacts/{id}/{name}", get(artifact))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

fn too_large(state: &AppState, size: usize) -> ApiError {
    ServiceError::PayloadTooLarge {
        size,
        limit: state.config.max_upload_bytes,
    }
    .into()
}

async fn read_upload(state: &AppState, mut multipart: Multipart) -> Result<(String, Bytes), ApiError> {
    loop {
        let field = multipart.next_field().await.map_err(|e| {
            if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
                too_large(state, 0)
            } else {
                ApiError::bad_request(e.body_text())
            }
        })?;
        let Some(field) = field else {
            return Err(ApiError::bad_request("multipart field `image` is missing"));
        };
        if field.name() != Some("image") {
            continue;
        }
        let filename = field.file_name().unwrap_or_default().to_owned();
        let bytes = field.bytes().await.map_err(|e| {
            if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
                too_large(state, 0)
            } else {
                ApiError::bad_request(e.body_text())
            }
        })?;
        if bytes.len() > state.config.max_upload_bytes {
            return Err(too_large(state, bytes.len()));
        }
        return Ok((filename, bytes));
    }
}

async fn analyze(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    multipart: Multipart,
) -> Result<Json<AnalysisResult>, ApiError> {
    let received_at = Utc::now();
    let key = headers
        .get(IDEMPOTENCY_HEADER)
        .map(|v| v.to_str().map(str::to_owned))
        .transpose()
        .map_err(|_| ApiError::bad_request("Idempotency-Key must be visible ASCII"))?;

    let key_lock = key.as_ref().map(|k| {
        let mut locks = state.key_locks.lock().expect("key lock map poisoned");
        locks.entry(k.clone()).or_default().clone()
    });
    let _held = match &key_lock {
        Some(l) => Some(l.lock().await),
        None => None,
    };
    if let Some(existing) = key.as_deref().and_then(|k| state.store.by_idempotency_key(k)) {
        return Ok(Json(existing.as_ref().clone()));
    }

    let (filename, bytes) = read_upload(&state, multipart).await?;
    let worker = state.clone();
    let key_for_record = key.clone();
    let result = tokio::task::spawn_blocking(move || {
        process(&worker, &bytes, &filename, received_at, key_for_record)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;

    drop(_held);
    if let (Some(k), Some(lock)) = (&key, key_lock) {
        let mut locks = state.key_locks.lock().expect("key lock map poisoned");
        // The map and this handler hold the only references when no other
        // request waits on the key.
        if Arc::strong_count(&lock) == 2 {
            locks.remove(k);
        }
    }
    Ok(Json(result.as_ref().clone()))
}

/// Runs the pipeline, writes artifacts, then appends the record.
fn process(
    state: &AppState,
    bytes: &[u8],
    filename: &str,
    received_at: chrono::DateTime<Utc>,
    idempotency_key: Option<String>,
) -> Result<Arc<AnalysisResult>, ServiceError> {
    let cfg = &state.config;
    let inference = pipeline::analyze(&state.models, bytes, filename, cfg.filter_threshold, cfg.overlay_alpha)?;
    let request_id = uuid::Uuid::new_v4().to_string();
    let upload_file = format!("{UPLOAD_STEM}.{}", inference.extension);
    state.store.write_artifact(&request_id, &upload_file, bytes)?;
    let (cam_url, overlay_url) = match &inference.cam {
        Some((heat, overlay)) => {
            state.store.write_artifact(&request_id, CAM_FILE, &encode_png(heat)?)?;
            state.store.write_artifact(&request_id, OVERLAY_FILE, &encode_png(overlay)?)?;
            (
                Some(format!("/api/v1/artifacts/{request_id}/{CAM_FILE}")),
                Some(format!("/api/v1/artifacts/{request_id}/{OVERLAY_FILE}")),
            )
        }
        None => (None, None),
    };
    let result = AnalysisResult {
        request_id,
        original_filename: filename.to_owned(),
        received_at,
        completed_at: Utc::now(),
        valid: inference.valid,
        filter_scores: inference.filter_scores,
        class_scores: inference.class_scores,
        summary: inference.summary,
        cam_url,
        overlay_url,
        pipeline: inference.pipeline,
        upload_file,
        idempotency_key,
    };
    tracing::info!(id = %result.request_id, summary = ?result.summary, "analysis stored");
    state.store.append(result)
}

async fn get_result(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<AnalysisResult>, ApiError> {
    state
        .store
        .get(&id)
        .map(|r| Json(r.as_ref().clone()))
        .ok_or_else(|| ApiError::not_found(format!("result {id}")))
}

#[derive(Debug, Deserialize)]
struct HistoryQuery {
    limit: Option<usize>,
}

async fn history(
    State(state): State<Arc<AppState>>,
    Query(q): Query<HistoryQuery>,
) -> Result<Json<Vec<AnalysisResult>>, ApiError> {
    let limit = q.limit.unwrap_or(DEFAULT_HISTORY_LIMIT);
    if limit == 0 {
        return Err(ApiError::bad_request("limit must be at least 1"));
    }
    Ok(Json(state.store.history(limit).iter().map(|r| r.as_ref().clone()).collect()))
}

async fn artifact(
    State(state): State<Arc<AppState>>,
    Path((id, name)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let record = state.store.get(&id).ok_or_else(|| ApiError::not_found(format!("result {id}")))?;
    if name != CAM_FILE && name != OVERLAY_FILE || !record.artifact_files().contains(&name.as_str()) {
        return Err(ApiError::not_found(format!("artifact {name}")));
    }
    let path = state.store.artifact_dir(&id).join(&name);
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::from(ServiceError::store(path, e)))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub filter: ModelIdentity,
    pub classifier: ModelIdentity,
    pub store_dir: String,
    pub records: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reasons: Vec<String>,
}

async fn healthz(State(state): State<Arc<AppState>>) -> (StatusCode, Json<Health>) {
    let probe_state = state.clone();
    let reasons: Vec<String> = tokio::task::spawn_blocking(move || probe_state.store.probe_writable())
        .await
        .unwrap_or_else(|e| Err(e.to_string()))
        .err()
        .into_iter()
        .collect();
    let status = if reasons.is_empty() {
        StatusCode::OK
    } else {
        StatusCode::SERVICE_UNAVAILABLE
    };
    let body = Health {
        status: if reasons.is_empty() { "ok" } else { "degraded" }.to_owned(),
        filter: state.models.filter_identity.clone(),
        classifier: state.models.classifier_identity.clone(),
        store_dir: state.store.root().display().to_string(),
        records: state.store.len(),
        reasons,
    };
    (status, Json(body))
}
