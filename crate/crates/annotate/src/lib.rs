//! HTTP facade over the adversarial-candidate store: candidate hand-out,
//! decision submission, the adjudication queue and progress counts.
//!
//! Every `/api` request carries `Authorization: Bearer <token>`. Empty
//! queues answer `204 No Content`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequestParts, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use nluadv_core::advset::{AdjudicationRecord, AdvStore, AnnotationRecord, Decision, Status};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub mod auth;
pub mod error;

pub use auth::{Role, SessionToken, TokenTable};
pub use error::ApiError;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<RwLock<AdvStore>>,
    pub tokens: Arc<TokenTable>,
}

impl AppState {
    pub fn new(store: AdvStore, tokens: TokenTable) -> Self {
        AppState {
            store: Arc::new(RwLock::new(store)),
            tokens: Arc::new(tokens),
        }
    }
}

/// The authenticated caller.
pub struct Caller(pub SessionToken);

impl FromRequestParts<AppState> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, ApiError> {
        let value = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .ok_or(ApiError::Unauthorized("missing bearer token"))?;
        let token = value.strip_prefix("Bearer ").ok_or(ApiError::Unauthorized("malformed authorization header"))?;
        let now = read(state).now();
        Ok(Caller(state.tokens.authenticate(token.trim(), now)?.clone()))
    }
}

fn read(state: &AppState) -> std::sync::RwLockReadGuard<'_, AdvStore> {
    state.store.read().unwrap_or_else(|p| p.into_inner())
}

fn write(state: &AppState) -> std::sync::RwLockWriteGuard<'_, AdvStore> {
    state.store.write().unwrap_or_else(|p| p.into_inner())
}

#[derive(Debug, Deserialize)]
pub struct Submission {
    pub candidate_id: String,
    pub decision: Decision,
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Accepted {
    pub candidate_id: String,
    pub status: Status,
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct LabelSpaceView {
    pub intents: Vec<String>,
    pub slot_labels: Vec<String>,
}

fn or_no_content<T: Serialize>(v: Option<T>) -> Response {
    match v {
        Some(v) => Json(v).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn next_candidate(State(state): State<AppState>, Caller(who): Caller) -> Response {
    or_no_content(write(&state).next_candidate(&who.annotator_id))
}

async fn submit_annotation(State(state): State<AppState>, Caller(who): Caller, body: Result<Json<Submission>, JsonRejection>) -> Result<Json<Accepted>, ApiError> {
    let Json(sub) = body?;
    let mut store = write(&state);
    let timestamp = store.now();
    let status = store.record_annotation(AnnotationRecord {
        candidate_id: sub.candidate_id.clone(),
        annotator_id: who.annotator_id,
        decision: sub.decision,
        timestamp,
    })?;
    Ok(Json(Accepted {
        candidate_id: sub.candidate_id,
        status,
    }))
}

fn require_adjudicator(who: &SessionToken) -> Result<(), ApiError> {
    match who.role {
        Role::Adjudicator => Ok(()),
        Role::Annotator => Err(ApiError::Forbidden("adjudicator role required")),
    }
}

async fn next_adjudication(State(state): State<AppState>, Caller(who): Caller) -> Result<Response, ApiError> {
    require_adjudicator(&who)?;
    Ok(or_no_content(write(&state).next_adjudication(&who.annotator_id)))
}

async fn submit_adjudication(State(state): State<AppState>, Caller(who): Caller, body: Result<Json<Submission>, JsonRejection>) -> Result<Json<Accepted>, ApiError> {
    require_adjudicator(&who)?;
    let Json(sub) = body?;
    let mut store = write(&state);
    let timestamp = store.now();
    let status = store.resolve(AdjudicationRecord {
        candidate_id: sub.candidate_id.clone(),
        adjudicator_id: who.annotator_id,
        decision: sub.decision,
        timestamp,
    })?;
    Ok(Json(Accepted {
        candidate_id: sub.candidate_id,
        status,
    }))
}

async fn progress(State(state): State<AppState>, _: Caller) -> Response {
    Json(read(&state).progress()).into_response()
}

async fn labelspace(State(state): State<AppState>, _: Caller) -> Json<LabelSpaceView> {
    let store = read(&state);
    Json(LabelSpaceView {
        intents: store.labels().intents().to_vec(),
        slot_labels: store.labels().slot_labels().to_vec(),
    })
}

/// API routes, plus the UI bundle from `static_dir` when given.
pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/candidates/next", get(next_candidate))
        .route("/api/annotations", post(submit_annotation))
        .route("/api/adjudications/next", get(next_adjudication))
        .route("/api/adjudications", post(submit_adjudication))
        .route("/api/progress", get(progress))
        .route("/api/labelspace", get(labelspace))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub addr: SocketAddr,
    pub static_dir: Option<PathBuf>,
}

/// Serves until Ctrl-C.
pub async fn serve(state: AppState, cfg: ServeConfig) -> Result<(), ApiError> {
    let listener = tokio::net::TcpListener::bind(cfg.addr).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, cfg.static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
