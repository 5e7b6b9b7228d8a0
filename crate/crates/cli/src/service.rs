//! HTTP facade over a campaign directory.
//!
//! ```text
//! GET  /state              current StateView
//! POST /step  {"index": i} stage-two step on 0-based input i
//! POST /exit               close the campaign
//! GET  /events?since=k&wait_ms=t
//!                          events with seq >= k, waiting up to t ms for one
//! ```
//!
//! Errors come back as `{"error": "..."}`: 400 malformed body, 409 step in
//! flight / campaign closed / directory locked, 422 index not a candidate,
//! 500 evaluation failure.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;
use tower_http::cors::CorsLayer;

use rlhd_core::campaign::{Actor, CampaignStore, Event, EventKind, Stage, StateView};
use rlhd_core::Error;

const MAX_WAIT_MS: u64 = 60_000;
const POLL: Duration = Duration::from_millis(200);

pub struct AppState {
    store: CampaignStore,
    stepping: AtomicBool,
    changed: Notify,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Precondition(_) | Error::Locked(_) => StatusCode::CONFLICT,
            Error::Domain(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut message = e.to_string();
        let mut cause = std::error::Error::source(&e);
        while let Some(c) = cause {
            message += &format!(": {c}");
            cause = c.source();
        }
        ApiError::new(status, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, Error> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

// clears the in-flight flag however the request ends
struct InFlight<'a>(&'a AtomicBool);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

async fn get_state(State(app): State<Arc<AppState>>) -> ApiResult<StateView> {
    let store = app.store.clone();
    Ok(Json(blocking(move || store.load().map(|s| s.view())).await?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRequest {
    index: usize,
}

async fn post_step(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<StateView> {
    let req: StepRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("expected {{\"index\": n}}: {e}")))?;
    if app.stepping.swap(true, Ordering::SeqCst) {
        return Err(ApiError::new(StatusCode::CONFLICT, "a step is already in flight"));
    }
    let _flight = InFlight(&app.stepping);
    let i = req.index;

    let store = app.store.clone();
    let state = blocking(move || store.load()).await?;
    match state.stage {
        Stage::Closed => return Err(ApiError::new(StatusCode::CONFLICT, "campaign is closed")),
        Stage::Fresh => return Err(ApiError::new(StatusCode::CONFLICT, "stage one has not run")),
        _ => {}
    }
    if !state.candidates().contains(&i) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("input {i} is not a candidate"),
        ));
    }

    let store = app.store.clone();
    let result = blocking(move || {
        store.append_event(EventKind::Progress, Some(i), Some(format!("evaluating Z{}", i + 1)), None)?;
        store.transact(|st, runner| st.stage_two_step(runner, i, Actor::Human).map(|_| (EventKind::Step, Some(i))))
    })
    .await;
    app.changed.notify_waiters();
    Ok(Json(result?.0.view()))
}

async fn post_exit(State(app): State<Arc<AppState>>) -> ApiResult<StateView> {
    if app.stepping.load(Ordering::SeqCst) {
        return Err(ApiError::new(StatusCode::CONFLICT, "a step is in flight"));
    }
    let store = app.store.clone();
    let result = blocking(move || store.transact(|st, _| st.close(Actor::Human).map(|_| (EventKind::Exit, None)))).await;
    app.changed.notify_waiters();
    Ok(Json(result?.0.view()))
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    since: usize,
    #[serde(default)]
    wait_ms: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EventsPage {
    pub events: Vec<Event>,
    /// Pass as `since` on the next poll.
    pub next: usize,
}

async fn get_events(State(app): State<Arc<AppState>>, Query(q): Query<EventsQuery>) -> ApiResult<EventsPage> {
    let wait = Duration::from_millis(q.wait_ms.unwrap_or(20_000).min(MAX_WAIT_MS));
    let deadline = tokio::time::Instant::now() + wait;
    loop {
        let store = app.store.clone();
        let events = blocking(move || store.events_since(q.since)).await?;
        if !events.is_empty() || tokio::time::Instant::now() >= deadline {
            let next = events.last().map_or(q.since, |e| e.seq + 1);
            return Ok(Json(EventsPage { events, next }));
        }
        // the CLI may write from another process, so poll as well as listen
        tokio::select! {
            _ = app.changed.notified() => {}
            _ = tokio::time::sleep(POLL) => {}
        }
    }
}

pub fn router(store: CampaignStore) -> Router {
    let app = Arc::new(AppState {
        store,
        stepping: AtomicBool::new(false),
        changed: Notify::new(),
    });
    Router::new()
        .route("/state", get(get_state))
        .route("/step", post(post_step))
        .route("/exit", post(post_exit))
        .route("/events", get(get_events))
        .layer(CorsLayer::permissive())
        .with_state(app)
}

pub async fn serve(store: CampaignStore, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("serving {} on http://{}", store.dir().display(), listener.local_addr()?);
    axum::serve(listener, router(store)).await?;
    Ok(())
}
