//! HTTP/JSON front end for the defended query engine.
//!
//! Routes:
//! - `GET /healthz`
//! - `POST /v1/query` with a [`QueryRequest`] body
//! - `GET /v1/stats`
//! - `GET /v1/config`

use std::future::Future;
use std::io;
use std::path::Path;
use std::sync::Arc;

use add_sentinel::formats::read_queries;
use add_sentinel::gateway::{Engine, EngineConfig, EngineStats, QueryRequest, QueryResponse};
use add_sentinel::reference::load_reference;
use add_sentinel::SentinelError;
use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use tokio::net::TcpListener;

#[derive(Clone)]
pub struct AppState {
    engine: Arc<Engine>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>) -> Self {
        Self { engine }
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    kind: String,
    message: String,
}

/// Error response; the body is always `{"kind": ..., "message": ...}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: String,
    message: String,
}

impl From<SentinelError> for ApiError {
    fn from(e: SentinelError) -> Self {
        let status = match &e {
            SentinelError::IoFailure(_) => StatusCode::INTERNAL_SERVER_ERROR,
            e if e.is_numeric() => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::BAD_REQUEST,
        };
        Self {
            status,
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            kind: "malformed_request".into(),
            message: r.body_text(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(ErrorBody {
                kind: self.kind,
                message: self.message,
            }),
        )
            .into_response()
    }
}

async fn healthz() -> &'static str {
    "ok"
}

async fn query(
    State(state): State<AppState>,
    body: Result<Json<QueryRequest>, JsonRejection>,
) -> Result<Json<QueryResponse>, ApiError> {
    let Json(request) = body?;
    let engine = Arc::clone(&state.engine);
    // scoring is CPU-bound and takes the account lock
    let resp = tokio::task::spawn_blocking(move || engine.handle_query(&request))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            kind: "internal".into(),
            message: e.to_string(),
        })??;
    Ok(Json(resp))
}

async fn stats(State(state): State<AppState>) -> Json<EngineStats> {
    Json(state.engine.stats())
}

async fn config(State(state): State<AppState>) -> Json<EngineConfig> {
    Json(state.engine.config().clone())
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/query", post(query))
        .route("/v1/stats", get(stats))
        .route("/v1/config", get(config))
        .with_state(AppState::new(engine))
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    engine: Arc<Engine>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "gateway listening");
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Builds an engine from an `ADDREF01` model and an `ADDQRY01` seed-pool
/// file, with the model's Gaussian discriminant as the target classifier.
pub fn load_engine(model: &Path, seeds: &Path, config: EngineConfig) -> Result<Engine, SentinelError> {
    let reference = Arc::new(load_reference(model)?);
    let (dim, records) = read_queries(seeds)?;
    if dim != reference.dim() {
        return Err(SentinelError::DimensionMismatch {
            expected: reference.dim(),
            actual: dim,
        });
    }
    let pool: Vec<Vec<f32>> = records.into_iter().map(|r| r.feature).collect();
    Engine::with_discriminant(reference, &pool, config)
}
