use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::config::EpisodeSpec;
use crate::episodes::Registry;
use crate::ServiceError;

pub const LONG_POLL: Duration = Duration::from_secs(25);

#[derive(Clone)]
pub struct AppState {
    pub registry: Arc<Registry>,
    pub poll_timeout: Duration,
}

impl AppState {
    pub fn new(log_dir: Option<PathBuf>) -> Self {
        Self { registry: Arc::new(Registry::new(log_dir)), poll_timeout: LONG_POLL }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let code = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::OutOfTurn { .. } => StatusCode::CONFLICT,
            ServiceError::InvalidRoster(_) | ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({ "error": self.to_string() });
        if let ServiceError::OutOfTurn { status } = &self {
            body["status"] = json!(status);
        }
        (code, Json(body)).into_response()
    }
}

#[derive(Deserialize)]
struct Since {
    #[serde(default)]
    since: usize,
}

#[derive(Deserialize)]
struct HumanMessage {
    agent: String,
    text: String,
}

async fn create(State(app): State<AppState>, Json(spec): Json<EpisodeSpec>) -> Result<impl IntoResponse, ServiceError> {
    let ep = app.registry.create(spec)?;
    Ok((StatusCode::CREATED, Json(ep.view())))
}

async fn show(State(app): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(app.registry.get(&id)?.view()))
}

async fn events(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<Since>,
) -> Result<impl IntoResponse, ServiceError> {
    let ep = app.registry.get(&id)?;
    Ok(Json(ep.events_since(q.since, app.poll_timeout).await))
}

async fn human(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(msg): Json<HumanMessage>,
) -> Result<impl IntoResponse, ServiceError> {
    let ep = app.registry.get(&id)?;
    let status = ep.post_human(&msg.agent, &msg.text).await?;
    Ok(Json(json!({ "accepted": true, "status": status })))
}

/// The four episode endpoints, plus static UI assets when `assets` is given.
pub fn router(app: AppState, assets: Option<PathBuf>) -> Router {
    let r = Router::new()
        .route("/episodes", post(create))
        .route("/episodes/{id}", get(show))
        .route("/episodes/{id}/events", get(events))
        .route("/episodes/{id}/human", post(human))
        .with_state(app);
    match assets {
        Some(dir) => r.fallback_service(ServeDir::new(dir)),
        None => r,
    }
}
