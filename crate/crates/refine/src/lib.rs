//! JSON-over-HTTP front for [`TaskStore`].
//!
//! | route                          | success              | errors          |
//! |--------------------------------|----------------------|-----------------|
//! | `GET /tasks/next?annotator=ID` | 200 task, 204 none   | 400             |
//! | `POST /tasks/{id}/submit`      | 200 task             | 400, 404, 409   |
//! | `GET /progress`                | 200 progress         |                 |
//! | `GET /lexicon`                 | 200 list of rules    |                 |
//!
//! Submit bodies are `{"annotator": "...", "final_text": "..."}`. Errors
//! come back as `{"error": "..."}`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use vipubmed_core::mednli::AbbrevLexicon;
use vipubmed_core::refine::{StoreError, TaskStore};

pub struct AppState {
    pub store: TaskStore,
    pub lexicon: AbbrevLexicon,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Deserialize)]
pub struct NextQuery {
    #[serde(default)]
    pub annotator: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubmitBody {
    pub annotator: String,
    pub final_text: String,
}

pub struct ApiError(StatusCode, String);

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let code = match &e {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::WrongClaimant { .. }
            | StoreError::LeaseExpired(_)
            | StoreError::NotClaimed(_)
            | StoreError::AlreadySubmitted(_) => StatusCode::CONFLICT,
            StoreError::EmptyText | StoreError::EmptyAnnotator | StoreError::NotMachineState(_) => {
                StatusCode::BAD_REQUEST
            }
            StoreError::Io(_) | StoreError::Corrupt { .. } | StoreError::Nli(_) => {
                log::error!("store failure: {e}");
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        ApiError(code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

// store calls may fsync, keep them off the async workers
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, StoreError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

async fn next_task(
    State(app): State<Arc<AppState>>,
    Query(q): Query<NextQuery>,
) -> Result<Response, ApiError> {
    let task = blocking(move || app.store.claim_next(&q.annotator)).await?;
    Ok(match task {
        Some(t) => Json(t).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn submit(
    State(app): State<Arc<AppState>>,
    Path(id): Path<u64>,
    Json(body): Json<SubmitBody>,
) -> Result<Response, ApiError> {
    let task = blocking(move || app.store.submit(id, &body.annotator, &body.final_text)).await?;
    Ok(Json(task).into_response())
}

async fn progress(State(app): State<Arc<AppState>>) -> Response {
    Json(app.store.progress()).into_response()
}

async fn lexicon(State(app): State<Arc<AppState>>) -> Response {
    Json(app.lexicon.rules()).into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/tasks/next", get(next_task))
        .route("/tasks/{id}/submit", post(submit))
        .route("/progress", get(progress))
        .route("/lexicon", get(lexicon))
        .with_state(state)
}

/// Serves until the listener fails or ctrl-c arrives.
pub async fn serve(listener: TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    log::info!("refine service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Blocking entry point for callers without a runtime.
pub fn run(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(async {
            let listener = TcpListener::bind(addr).await?;
            serve(listener, state).await
        })
}
