//! HTTP JSON front end over a loaded checkpoint.

use std::path::Path;
use std::sync::Arc;

use adacbm_core::{AdaCbmModel, Dataset};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tower_http::services::ServeDir;

use crate::payload::{self, PredictionPayload};

/// Everything a request can read. Built once at startup and never mutated.
pub struct ServeState {
    pub model: AdaCbmModel,
    pub browse: Option<Dataset>,
}

impl ServeState {
    pub fn new(model: AdaCbmModel, browse: Option<Dataset>) -> anyhow::Result<Self> {
        if let Some(ds) = &browse {
            anyhow::ensure!(
                ds.dims() == model.dim(),
                "browse embeddings have {} dims, model expects {}",
                ds.dims(),
                model.dim()
            );
        }
        Ok(Self { model, browse })
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Deserialize)]
struct PredictRequest {
    image_id: Option<String>,
    embedding: Option<Vec<f64>>,
    excluded_concept_ids: Option<Vec<String>>,
}

fn parse_body(body: &[u8]) -> Result<PredictRequest, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed request body: {e}")))
}

fn resolve_input(state: &ServeState, req: &PredictRequest) -> Result<Vec<f64>, ApiError> {
    let d = state.model.dim();
    match (&req.image_id, &req.embedding) {
        (Some(id), None) => {
            let ds = state
                .browse
                .as_ref()
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no browse dataset is loaded"))?;
            let i = ds
                .position_of(id)
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown image id {id:?}")))?;
            Ok(ds.x(i).to_vec())
        }
        (None, Some(x)) => {
            if x.len() != d {
                return Err(ApiError::new(
                    StatusCode::BAD_REQUEST,
                    format!("embedding has length {}, expected d = {d}", x.len()),
                ));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(ApiError::new(StatusCode::BAD_REQUEST, "embedding contains non-finite values"));
            }
            Ok(x.clone())
        }
        _ => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "body must contain exactly one of image_id or embedding",
        )),
    }
}

fn internal(e: adacbm_core::Error) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

async fn healthz() -> &'static str {
    "ok"
}

async fn model_info(State(state): State<Arc<ServeState>>) -> Json<payload::ModelSummary> {
    Json(payload::model_summary(&state.model))
}

async fn images(State(state): State<Arc<ServeState>>) -> ApiResult<Vec<adacbm_core::ImageRecord>> {
    match &state.browse {
        Some(ds) => Ok(Json(ds.records().to_vec())),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "no browse dataset is loaded")),
    }
}

async fn predict(State(state): State<Arc<ServeState>>, body: Bytes) -> ApiResult<PredictionPayload> {
    let req = parse_body(&body)?;
    if req.excluded_concept_ids.is_some() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "excluded_concept_ids belongs on /api/intervene",
        ));
    }
    let x = resolve_input(&state, &req)?;
    payload::predict(&state.model, &x).map(Json).map_err(internal)
}

async fn intervene(State(state): State<Arc<ServeState>>, body: Bytes) -> ApiResult<PredictionPayload> {
    let req = parse_body(&body)?;
    let x = resolve_input(&state, &req)?;
    let excluded = req.excluded_concept_ids.unwrap_or_default();
    let bank = state.model.concepts();
    if let Some(bad) = excluded.iter().find(|id| bank.index_of(id).is_none()) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("unknown concept id {bad:?}"),
        ));
    }
    payload::intervene(&state.model, &x, &excluded).map(Json).map_err(internal)
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no such route")
}

/// All API routes, with `static_dir` (if any) served for everything else.
pub fn router(state: Arc<ServeState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route("/api/model", get(model_info))
        .route("/api/images", get(images))
        .route("/api/predict", post(predict))
        .route("/api/intervene", post(intervene))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(not_found),
    }
}
