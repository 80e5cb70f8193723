//! HTTP inference service.

use crate::api::{encode_png, ErrorBody, Interpolated, PredictRequest, PredictResponse, RequestError};
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use stgan::lie::{FrameMap, WarpParams};
use stgan::model::{pixel_homographies, warp_chain, Model, ModelInfo};
use stgan::warp;

pub const DEFAULT_BODY_LIMIT: usize = 8 * 1024 * 1024;

#[derive(Debug)]
pub struct AppState {
    pub model: Model,
    pub info: ModelInfo,
    pub body_limit: usize,
    pub ui_dir: Option<PathBuf>,
    failures: AtomicU64,
}

impl AppState {
    pub fn new(model: Model, info: ModelInfo) -> Self {
        AppState {
            model,
            info,
            body_limit: DEFAULT_BODY_LIMIT,
            ui_dir: None,
            failures: AtomicU64::new(0),
        }
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.body_limit;
    Router::new()
        .route("/health", get(health))
        .route("/model-info", get(model_info))
        .route("/predict", post(predict))
        .route("/ui", get(ui_index))
        .route("/ui/{*path}", get(ui_file))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(Arc::new(state))
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (
        status,
        Json(ErrorBody {
            error: msg.into(),
            id: None,
        }),
    )
        .into_response()
}

fn internal(state: &AppState, detail: &str) -> Response {
    let n = state.failures.fetch_add(1, Ordering::Relaxed);
    let id = format!("{}-{n}", state.info.model_id);
    eprintln!("internal error {id}: {detail}");
    (
        StatusCode::INTERNAL_SERVER_ERROR,
        Json(ErrorBody {
            error: "internal error".into(),
            id: Some(id),
        }),
    )
        .into_response()
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn model_info(State(state): State<Arc<AppState>>) -> Json<ModelInfo> {
    Json(state.info.clone())
}

async fn predict(State(state): State<Arc<AppState>>, body: Result<Bytes, axum::extract::rejection::BytesRejection>) -> Response {
    let body = match body {
        Ok(b) => b,
        Err(e) => return error(e.status(), e.body_text()),
    };
    if body.len() > state.body_limit {
        return error(StatusCode::PAYLOAD_TOO_LARGE, "request body too large");
    }
    let req: PredictRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let st = state.clone();
    match tokio::task::spawn_blocking(move || run_predict(&st, &req)).await {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(Failure::Request(RequestError::Malformed(m)))) => error(StatusCode::BAD_REQUEST, m),
        Ok(Err(Failure::Request(RequestError::Undecodable(m)))) => error(StatusCode::UNPROCESSABLE_ENTITY, m),
        Ok(Err(Failure::Internal(m))) => internal(&state, &m),
        Err(e) => internal(&state, &e.to_string()),
    }
}

pub enum Failure {
    Request(RequestError),
    Internal(String),
}

impl From<RequestError> for Failure {
    fn from(e: RequestError) -> Self {
        Failure::Request(e)
    }
}

fn internal_err(e: impl std::fmt::Display) -> Failure {
    Failure::Internal(e.to_string())
}

/// The whole request on the calling thread; deterministic for a fixed model.
pub fn run_predict(state: &AppState, req: &PredictRequest) -> Result<PredictResponse, Failure> {
    let inputs = req.inputs()?;
    let (bg, fg) = (&inputs.bg, &inputs.fg);
    let states = warp_chain(&state.model, state.model.resolution(), fg, bg, inputs.p0, req.stages).map_err(internal_err)?;
    let homographies = pixel_homographies(&states, bg.width, bg.height);
    let previews = if req.previews {
        let fm = FrameMap::new(bg.width, bg.height);
        let mut out = Vec::with_capacity(states.len());
        for p in &states {
            let warped = warp::warp_foreground(fg, p, &fm).map_err(internal_err)?;
            let comp = warp::composite(&warped, bg).map_err(internal_err)?;
            out.push(encode_png(&comp).map_err(internal_err)?);
        }
        Some(out)
    } else {
        None
    };
    let interpolated = (req.interpolation_steps > 0).then(|| interpolate(&states, req.interpolation_steps, bg.width, bg.height));
    Ok(PredictResponse {
        states: states.iter().map(|p| p.0).collect(),
        homographies: homographies.iter().map(|h| h.to_row_major()).collect(),
        width: bg.width,
        height: bg.height,
        previews,
        interpolated,
        model_kind: state.info.kind.clone(),
        model_id: state.info.model_id.clone(),
    })
}

fn interpolate(states: &[WarpParams], steps: usize, width: usize, height: usize) -> Interpolated {
    let mut t = Vec::new();
    let mut ps = Vec::new();
    // each stage state, then `steps` points toward the next
    for (i, pair) in states.windows(2).enumerate() {
        for k in 0..=steps {
            let a = k as f64 / (steps + 1) as f64;
            t.push(i as f64 + a);
            ps.push(WarpParams(std::array::from_fn(|j| pair[0].0[j] + a * (pair[1].0[j] - pair[0].0[j]))));
        }
    }
    if let Some(last) = states.last() {
        t.push((states.len() - 1) as f64);
        ps.push(*last);
    }
    let homographies = pixel_homographies(&ps, width, height).iter().map(|h| h.to_row_major()).collect();
    Interpolated {
        t,
        states: ps.iter().map(|p| p.0).collect(),
        homographies,
    }
}

async fn ui_index(State(state): State<Arc<AppState>>) -> Response {
    serve_file(&state, "index.html").await
}

async fn ui_file(State(state): State<Arc<AppState>>, Path(path): Path<String>) -> Response {
    serve_file(&state, &path).await
}

async fn serve_file(state: &AppState, rel: &str) -> Response {
    let Some(root) = &state.ui_dir else {
        return error(StatusCode::NOT_FOUND, "no UI bundle configured");
    };
    let rel = std::path::Path::new(rel);
    if rel.components().any(|c| !matches!(c, std::path::Component::Normal(_))) {
        return error(StatusCode::BAD_REQUEST, "invalid path");
    }
    let path = root.join(rel);
    let mime = match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") => "text/javascript",
        Some("css") => "text/css",
        Some("png") => "image/png",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, mime)], bytes).into_response(),
        Err(_) => error(StatusCode::NOT_FOUND, "not found"),
    }
}
