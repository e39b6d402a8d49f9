//! JSON-over-HTTP front end. Mutations go through `POST /runs/{id}/actions`
//! and run in the background; clients poll the returned job.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use super::{Action, App, ExportKind, PipelineConfig};
use crate::corpus::parse_scene_json;
use crate::error::Error;

struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = match &self.0 {
            Error::RunNotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::IllegalTransition { .. } => (StatusCode::BAD_REQUEST, "illegal_transition"),
            Error::Busy(_) => (StatusCode::CONFLICT, "busy"),
            Error::NotReady(_) => (StatusCode::CONFLICT, "not_ready"),
            Error::InvalidInput(_)
            | Error::MalformedInput(_)
            | Error::InvalidParams(_)
            | Error::EmptyInput => (StatusCode::BAD_REQUEST, "invalid_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        (
            status,
            Json(json!({ "error": code, "message": self.0.to_string() })),
        )
            .into_response()
    }
}

fn bad_body(rejection: JsonRejection) -> ApiError {
    ApiError(Error::InvalidInput(rejection.body_text()))
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> crate::Result<T> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(Error::InvalidInput(format!("worker task failed: {e}"))))?
        .map_err(ApiError)
}

#[derive(Deserialize)]
struct CreateRun {
    /// Scene JSON document: `{"id", "title", "scenes": [{"index", "text"}]}`.
    narrative: serde_json::Value,
    #[serde(default)]
    config: Option<PipelineConfig>,
}

#[derive(Deserialize)]
struct ActionBody {
    action: String,
}

#[derive(Deserialize)]
struct ExportQuery {
    kind: String,
}

async fn create_run(
    State(app): State<Arc<App>>,
    body: Result<Json<CreateRun>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(body) = body.map_err(bad_body)?;
    let narrative = parse_scene_json(&body.narrative.to_string())?;
    let config = body.config.unwrap_or_default();
    let record = blocking(move || app.create_run(&narrative, config)).await?;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn get_run(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let record = blocking(move || app.get(&id)).await?;
    Ok(Json(record).into_response())
}

async fn post_action(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    body: Result<Json<ActionBody>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(body) = body.map_err(bad_body)?;
    let action: Action = body.action.parse()?;
    let submit_app = Arc::clone(&app);
    let run_id = id.clone();
    let (guard, job) = blocking(move || submit_app.submit(&run_id, action)).await?;
    let job_id = job.job_id.clone();
    tokio::task::spawn_blocking(move || {
        if let Err(e) = app.run_job(guard, &job_id) {
            tracing::warn!(run = %id, job = %job_id, error = %e, "action failed");
        }
    });
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

async fn get_job(
    State(app): State<Arc<App>>,
    Path((id, job)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let record = blocking(move || app.get(&id)).await?;
    let job = record
        .job(&job)
        .cloned()
        .ok_or_else(|| ApiError(Error::RunNotFound(format!("{}/jobs/{job}", record.run_id))))?;
    Ok(Json(job).into_response())
}

async fn export(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    Query(q): Query<ExportQuery>,
) -> Result<Response, ApiError> {
    let kind: ExportKind = q.kind.parse()?;
    let body = blocking(move || app.export(&id, kind)).await?;
    let content_type = match kind {
        ExportKind::ScoreJson | ExportKind::GraphJson => "application/json",
        ExportKind::TextSummary => "text/plain; charset=utf-8",
    };
    Ok(([(header::CONTENT_TYPE, content_type)], body).into_response())
}

pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/runs", post(create_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/actions", post(post_action))
        .route("/runs/{id}/jobs/{job}", get(get_job))
        .route("/runs/{id}/export", get(export))
        .with_state(app)
}

pub async fn serve(app: Arc<App>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(app)).await
}
