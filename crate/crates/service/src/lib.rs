//! HTTP API that puts a human annotator inside the online adaptation loop.
//!
//! | method | path | body |
//! |---|---|---|
//! | POST | `/sessions` | [`api::CreateSession`] → [`api::SessionCreated`] |
//! | GET | `/sessions/{id}` | [`api::SessionStatus`] |
//! | GET | `/sessions/{id}/next-batch` | [`api::BatchPayload`] |
//! | POST | `/sessions/{id}/batches/{bid}/annotations` | [`api::AnnotationSubmission`] → [`api::AnnotationAck`] or [`api::AnnotationPending`] |
//! | GET | `/sessions/{id}/metrics` | [`api::Metrics`] |
//! | GET | `/sessions/{id}/slices/{bid}/{file}` | `N.png`, `N.prediction.png`, `N.truth.png`, `N.f32` |
//! | GET | `/schemas`, `/schemas/v1/{name}.json` | JSON schemas |
//!
//! Errors carry an [`api::ErrorBody`]: 400 bad request or config, 404
//! unknown session or file, 409 wrong state or stale batch, 410 stream
//! finished, 422 annotations outside the query set.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use odes_core::adaptation::AdaptError;
use odes_harness::{ExperimentConfig, HarnessError};
use serde::de::DeserializeOwned;
use thiserror::Error;

pub mod api;
pub mod render;
pub mod schemas;
pub mod session;

use api::{AnnotationSubmission, CreateSession, ErrorBody, Offending, SessionState};
use session::{Session, Submitted};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("no session {0}")]
    UnknownSession(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{message}")]
    Conflict { state: SessionState, message: String },
    #[error("the stream is exhausted")]
    Finished,
    #[error("{message}")]
    Rejected { message: String, offending: Vec<Offending> },
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Config(#[from] HarnessError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::UnknownSession(_) | Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::Conflict { .. } => StatusCode::CONFLICT,
            Self::Finished => StatusCode::GONE,
            Self::Rejected { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::Config(e) if e.exit_code() == 2 => StatusCode::BAD_REQUEST,
            Self::Config(_) | Self::Adapt(_) | Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            Self::UnknownSession(_) => "unknown_session",
            Self::NotFound(_) => "not_found",
            Self::Conflict { .. } => "conflict",
            Self::Finished => "stream_finished",
            Self::Rejected { .. } => "invalid_annotations",
            Self::BadRequest(_) => "bad_request",
            Self::Config(e) if e.exit_code() == 2 => "bad_config",
            _ => "internal",
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            log::error!("{self}");
        }
        let body = ErrorBody {
            error: self.code().into(),
            message: self.to_string(),
            offending: match self {
                Self::Rejected { offending, .. } => offending,
                _ => Vec::new(),
            },
        };
        (status, Json(body)).into_response()
    }
}

/// Shared server state: the session table and the configuration used when a
/// create request carries none.
#[derive(Clone)]
pub struct AppState {
    sessions: Arc<RwLock<HashMap<String, Arc<Session>>>>,
    defaults: Arc<ExperimentConfig>,
}

impl AppState {
    pub fn new(defaults: ExperimentConfig) -> Self {
        Self {
            sessions: Arc::default(),
            defaults: Arc::new(defaults),
        }
    }

    pub fn session(&self, id: &str) -> Result<Arc<Session>, ServiceError> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_status))
        .route("/sessions/{id}/next-batch", get(next_batch))
        .route("/sessions/{id}/batches/{bid}/annotations", post(submit_annotations))
        .route("/sessions/{id}/metrics", get(metrics))
        .route("/sessions/{id}/slices/{bid}/{file}", get(slice_file))
        .route("/schemas", get(schema_index))
        .route("/schemas/{version}/{file}", get(schema_file))
        .with_state(state)
}

/// Binds `addr` and serves until the process exits.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))?
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("invalid request body: {e}")))
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> Result<Response, ServiceError> {
    let req: CreateSession = if body.is_empty() { CreateSession::default() } else { parse(&body)? };
    let cfg = req.config.unwrap_or_else(|| app.defaults.as_ref().clone());
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = blocking(move || Session::create(id, &cfg, req.seed, req.demo)).await?;
    let created = session.created();
    log::info!("session {} created (seed {})", created.session_id, created.seed);
    app.sessions
        .write()
        .unwrap_or_else(|e| e.into_inner())
        .insert(created.session_id.clone(), Arc::new(session));
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

async fn session_status(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(app.session(&id)?.status()).into_response())
}

async fn next_batch(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let session = app.session(&id)?;
    let s = session.clone();
    let (payload, needs_update) = blocking(move || s.next_batch()).await?;
    if needs_update {
        tokio::task::spawn_blocking(move || {
            if let Err(e) = session.run_pending_update() {
                log::error!("session {}: {e}", session.id);
            }
        });
    }
    Ok(Json(payload).into_response())
}

async fn submit_annotations(
    State(app): State<AppState>,
    Path((id, bid)): Path<(String, u64)>,
    body: Bytes,
) -> Result<Response, ServiceError> {
    let session = app.session(&id)?;
    let req: AnnotationSubmission = parse(&body)?;
    let outcome = blocking(move || session.submit(bid, req.records, req.finalize)).await?;
    Ok(match outcome {
        Submitted::Done(ack) => Json(ack).into_response(),
        Submitted::Pending(p) => (StatusCode::ACCEPTED, Json(p)).into_response(),
    })
}

async fn metrics(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(app.session(&id)?.metrics()).into_response())
}

async fn slice_file(
    State(app): State<AppState>,
    Path((id, bid, file)): Path<(String, u64, String)>,
) -> Result<Response, ServiceError> {
    let session = app.session(&id)?;
    let missing = || ServiceError::NotFound(format!("no file {file} for batch {bid}"));
    let rendered = session.rendered().filter(|r| r.batch_id == bid).ok_or_else(missing)?;
    let (stem, ext) = file.split_once('.').ok_or_else(missing)?;
    let index: usize = stem.parse().map_err(|_| missing())?;
    let (set, content_type) = match ext {
        "png" => (Some(&rendered.images), "image/png"),
        "prediction.png" => (Some(&rendered.predictions), "image/png"),
        "truth.png" => (rendered.truth.as_ref(), "image/png"),
        "f32" => (Some(&rendered.raw), "application/octet-stream"),
        _ => (None, ""),
    };
    let bytes = set.and_then(|s| s.get(index)).ok_or_else(missing)?.clone();
    Ok(([(header::CONTENT_TYPE, content_type)], bytes).into_response())
}

async fn schema_index() -> Response {
    Json(schemas::index()).into_response()
}

async fn schema_file(Path((version, file)): Path<(String, String)>) -> Result<Response, ServiceError> {
    let missing = || ServiceError::NotFound(format!("no schema {version}/{file}"));
    if version != schemas::VERSION {
        return Err(missing());
    }
    let name = file.strip_suffix(".json").ok_or_else(missing)?;
    let schema = schemas::schema(name).ok_or_else(missing)?;
    Ok(([(header::CONTENT_TYPE, "application/schema+json")], Json(schema)).into_response())
}
