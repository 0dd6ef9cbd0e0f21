use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tokio::net::TcpListener;

use crate::store::{Store, StoreError, SubmissionBody, WorkKind};

pub type Shared = Arc<Mutex<Store>>;

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let code = match &e {
            StoreError::UnknownRater(_) => StatusCode::UNAUTHORIZED,
            StoreError::Forbidden(_) => StatusCode::FORBIDDEN,
            StoreError::Conflict(_) => StatusCode::CONFLICT,
            StoreError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::Io { .. } | StoreError::CorruptLog { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if code == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{e}");
        }
        ApiError(code, e.to_string())
    }
}

fn lock(store: &Shared) -> std::sync::MutexGuard<'_, Store> {
    // a panic mid-request leaves the index consistent with the log, so carry on
    store.lock().unwrap_or_else(|p| p.into_inner())
}

fn rater(store: &Store, headers: &HeaderMap) -> Result<String, ApiError> {
    let token = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .ok_or_else(|| ApiError(StatusCode::UNAUTHORIZED, "missing bearer token".into()))?;
    store
        .rater_for_token(token.trim())
        .map(str::to_string)
        .ok_or_else(|| ApiError(StatusCode::UNAUTHORIZED, "unknown token".into()))
}

fn parse_kind(s: &str) -> Result<WorkKind, ApiError> {
    WorkKind::parse(s).ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown work kind {s}")))
}

async fn next_item(
    State(store): State<Shared>,
    headers: HeaderMap,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Response, ApiError> {
    let mut s = lock(&store);
    let who = rater(&s, &headers)?;
    let kind = q.get("kind").ok_or_else(|| ApiError(StatusCode::UNPROCESSABLE_ENTITY, "kind is required".into()))?;
    let kind = WorkKind::parse(kind)
        .ok_or_else(|| ApiError(StatusCode::UNPROCESSABLE_ENTITY, format!("unknown work kind {kind}")))?;
    Ok(match s.next_item(&who, kind)? {
        Some(item) => Json(item).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn submit(
    State(store): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Result<Json<SubmissionBody>, axum::extract::rejection::JsonRejection>,
) -> Result<Response, ApiError> {
    let mut s = lock(&store);
    let who = rater(&s, &headers)?;
    let Json(body) = body.map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.body_text()))?;
    s.submit(&id, &who, body)?;
    Ok(Json(json!({ "accepted": id })).into_response())
}

async fn export(
    State(store): State<Shared>,
    headers: HeaderMap,
    Path(kind): Path<String>,
) -> Result<Response, ApiError> {
    let s = lock(&store);
    rater(&s, &headers)?;
    let kind = match kind.as_str() {
        "sft" => WorkKind::RefineComment,
        "dpo" => WorkKind::ValidatePair,
        "ratings" => WorkKind::RateComment,
        other => parse_kind(other)?,
    };
    Ok(match kind {
        WorkKind::RefineComment => Json(s.export_sft()).into_response(),
        WorkKind::ValidatePair => Json(s.export_dpo()).into_response(),
        WorkKind::RateComment => Json(s.export_ratings()).into_response(),
    })
}

async fn progress(State(store): State<Shared>, headers: HeaderMap) -> Result<Response, ApiError> {
    let s = lock(&store);
    rater(&s, &headers)?;
    let p: HashMap<&str, _> = s.progress().into_iter().map(|(k, v)| (k.name(), v)).collect();
    Ok(Json(p).into_response())
}

pub fn router(store: Shared) -> Router {
    Router::new()
        .route("/api/items/next", get(next_item))
        .route("/api/items/{id}/submit", post(submit))
        .route("/api/export/{kind}", get(export))
        .route("/api/progress", get(progress))
        .with_state(store)
}

/// Bind and serve until the future is dropped or the process exits.
pub async fn serve(store: Shared, addr: SocketAddr) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store)).await
}

/// Serve on an already bound listener. Handy when the caller needs the port.
pub async fn serve_on(store: Shared, listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(store)).await
}
