use std::sync::Arc;

use arc_swap::ArcSwap;
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use clickforge_core::adapter::AdaptMode;
use clickforge_core::guidance::Click;
use clickforge_core::protocol::*;
use serde::de::DeserializeOwned;
use tokio::sync::{mpsc, oneshot};

use crate::engine::{Command, Reply, Snapshot};
use crate::error::ApiError;

const BODY_LIMIT: usize = 16 * 1024 * 1024;

#[derive(Clone)]
pub struct AppState {
    pub commands: mpsc::Sender<Command>,
    pub snapshots: Arc<ArcSwap<Snapshot>>,
    pub retry_after: u64,
}

impl AppState {
    async fn send<T>(&self, build: impl FnOnce(Reply<T>) -> Command) -> Result<T, ApiError> {
        let (tx, rx) = oneshot::channel();
        self.commands.try_send(build(tx)).map_err(|e| match e {
            mpsc::error::TrySendError::Full(_) => {
                ApiError::busy("command queue is full", self.retry_after)
            }
            mpsc::error::TrySendError::Closed(_) => ApiError::internal("engine is not running"),
        })?;
        rx.await.map_err(|_| ApiError::internal("engine dropped the request"))?
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(discard_session))
        .route("/sessions/{id}/clicks", post(post_click))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/finish", post(finish))
        .route("/healthz", get(health))
        .route("/checkpoints", get(checkpoints))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

async fn create_session(
    State(app): State<AppState>,
    mut form: Multipart,
) -> Result<(StatusCode, Json<CreatedSession>), ApiError> {
    let (mut image, mut gt, mut mode) = (None, None, None);
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(e.to_string()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
        match name.as_str() {
            "image" => image = Some(data.to_vec()),
            "gt" => gt = Some(data.to_vec()),
            "mode" => {
                let text = std::str::from_utf8(&data)
                    .map_err(|_| ApiError::bad_request("mode must be text"))?;
                mode = Some(text.trim().parse::<AdaptMode>()?);
            }
            other => return Err(ApiError::bad_request(format!("unexpected field `{other}`"))),
        }
    }
    let image = image.ok_or_else(|| ApiError::bad_request("missing `image` field"))?;
    let created = app
        .send(|reply| Command::Create { image, gt, mode, reply })
        .await?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn post_click(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<ClickResponse>, ApiError> {
    let click: Click = parse_json(&body)?;
    Ok(Json(app.send(|reply| Command::Click { id, click, reply }).await?))
}

async fn undo(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<UndoResponse>, ApiError> {
    Ok(Json(app.send(|reply| Command::Undo { id, reply }).await?))
}

async fn finish(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<FinishResponse>, ApiError> {
    Ok(Json(app.send(|reply| Command::Finish { id, reply }).await?))
}

async fn discard_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    app.send(|reply| Command::Discard { id, reply }).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionState>, ApiError> {
    let snap = app.snapshots.load();
    let state = snap.sessions.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    Ok(Json((**state).clone()))
}

async fn health(State(app): State<AppState>) -> Json<Health> {
    Json(app.snapshots.load().health.clone())
}

async fn checkpoints(State(app): State<AppState>) -> Json<CheckpointList> {
    Json(app.snapshots.load().checkpoints.clone())
}
