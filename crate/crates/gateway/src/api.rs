//! HTTP service under `/v1`. Bodies are JSON with snake_case fields;
//! `/v1/events` is a server-sent event stream with one message per
//! [`BridgeEvent`], using the event kind as the SSE event name and the
//! sequence number as its id.

use std::convert::Infallible;
use std::future::Future;
use std::path::{Path as FsPath, PathBuf};
use std::sync::mpsc::RecvTimeoutError;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use usbbridge::bridge::{Bridge, BridgeError, BridgeEvent, CopyRequest, PortState, TransferJob};
use usbbridge::usb::PortId;

use crate::state::PortFile;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:7780";

#[derive(Clone)]
pub struct AppState {
    pub bridge: Bridge,
    /// Where attachments are recorded; `None` keeps them in memory only.
    pub state_file: Option<PathBuf>,
}

impl AppState {
    fn record(&self) {
        if let Some(path) = &self.state_file {
            let file = PortFile::from_ports(&self.bridge.ports());
            if let Err(e) = file.save(path) {
                eprintln!("warning: cannot save {}: {e}", path.display());
            }
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    pub error: String,
    pub message: String,
    #[serde(skip)]
    pub status: StatusCode,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            error: code.to_string(),
            message: message.into(),
            status,
        }
    }
}

/// HTTP status for a bridge or filesystem error code.
pub fn status_for(code: &str) -> StatusCode {
    match code {
        "not-found" | "unknown-job" | "unknown-port" => StatusCode::NOT_FOUND,
        "port-occupied" | "port-empty" | "port-not-ready" | "exists-no-overwrite" | "read-only" => {
            StatusCode::CONFLICT
        }
        "dest-full" | "disk-full" => StatusCode::INSUFFICIENT_STORAGE,
        "bad-request" | "same-port" | "is-a-directory" | "not-a-directory" | "name-invalid" | "image-error" => {
            StatusCode::BAD_REQUEST
        }
        "device-gone" => StatusCode::GONE,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<BridgeError> for ApiError {
    fn from(e: BridgeError) -> Self {
        ApiError::new(status_for(e.code()), e.code(), e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad-request", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn port_param(s: &str) -> ApiResult<PortId> {
    s.parse()
        .map_err(|m: String| ApiError::new(StatusCode::NOT_FOUND, "unknown-port", m))
}

/// Runs a bridge call off the async executor; volume locks can wait for a
/// chunk in flight.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> T {
    tokio::task::spawn_blocking(f).await.expect("bridge call panicked")
}

#[derive(Debug, Serialize)]
pub struct ApiSnapshot {
    pub ports: Vec<PortState>,
    pub jobs: Vec<TransferJob>,
}

#[derive(Debug, Deserialize)]
pub struct AttachBody {
    pub image: PathBuf,
    #[serde(default)]
    pub read_only: bool,
}

#[derive(Debug, Deserialize)]
pub struct JobBody {
    pub src_port: String,
    pub src_path: String,
    pub dst_port: String,
    pub dst_path: String,
    #[serde(default)]
    pub overwrite: bool,
    #[serde(default)]
    pub recursive: bool,
}

#[derive(Debug, Deserialize)]
pub struct FsQuery {
    pub path: Option<String>,
}

pub fn router(app: AppState) -> Router {
    Router::new()
        .route("/v1/ports", get(list_ports))
        .route("/v1/ports/{port}", get(get_port))
        .route("/v1/ports/{port}/attach", post(attach))
        .route("/v1/ports/{port}/detach", post(detach))
        .route("/v1/fs/{port}", get(browse))
        .route("/v1/jobs", get(list_jobs).post(start_job))
        .route("/v1/jobs/{id}", get(get_job))
        .route("/v1/jobs/{id}/cancel", post(cancel_job))
        .route("/v1/snapshot", get(snapshot))
        .route("/v1/events", get(events))
        .with_state(app)
}

async fn list_ports(State(app): State<AppState>) -> Json<Vec<PortState>> {
    Json(app.bridge.ports())
}

async fn get_port(State(app): State<AppState>, Path(port): Path<String>) -> ApiResult<Json<PortState>> {
    Ok(Json(app.bridge.port(port_param(&port)?)))
}

async fn snapshot(State(app): State<AppState>) -> Json<ApiSnapshot> {
    Json(ApiSnapshot {
        ports: app.bridge.ports(),
        jobs: app.bridge.jobs(),
    })
}

async fn attach(
    State(app): State<AppState>,
    Path(port): Path<String>,
    body: Result<Json<AttachBody>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<PortState>)> {
    let port = port_param(&port)?;
    let Json(body) = body?;
    let image = std::path::absolute(&body.image).unwrap_or(body.image);
    let a = app.clone();
    let s = blocking(move || a.bridge.attach(port, &image, body.read_only)).await?;
    app.record();
    Ok((StatusCode::ACCEPTED, Json(s)))
}

async fn detach(State(app): State<AppState>, Path(port): Path<String>) -> ApiResult<Json<PortState>> {
    let port = port_param(&port)?;
    let a = app.clone();
    let s = blocking(move || a.bridge.detach(port)).await?;
    app.record();
    Ok(Json(s))
}

async fn browse(
    State(app): State<AppState>,
    Path(port): Path<String>,
    Query(q): Query<FsQuery>,
) -> ApiResult<impl IntoResponse> {
    let port = port_param(&port)?;
    let path = q.path.unwrap_or_else(|| "/".into());
    Ok(Json(blocking(move || app.bridge.browse(port, &path)).await?))
}

async fn list_jobs(State(app): State<AppState>) -> Json<Vec<TransferJob>> {
    Json(app.bridge.jobs())
}

async fn start_job(
    State(app): State<AppState>,
    body: Result<Json<JobBody>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<TransferJob>)> {
    let Json(b) = body?;
    let bad = |m: String| ApiError::new(StatusCode::BAD_REQUEST, "bad-request", m);
    let req = CopyRequest {
        src_port: b.src_port.parse().map_err(bad)?,
        src_path: b.src_path,
        dst_port: b.dst_port.parse().map_err(bad)?,
        dst_path: b.dst_path,
        overwrite: b.overwrite,
        recursive: b.recursive,
    };
    let job = blocking(move || app.bridge.start_copy(&req)).await?;
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn get_job(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<TransferJob>> {
    Ok(Json(app.bridge.job(&id)?))
}

async fn cancel_job(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<TransferJob>> {
    Ok(Json(app.bridge.cancel(&id)?))
}

pub fn sse_event(ev: &BridgeEvent) -> Event {
    Event::default()
        .id(ev.seq.to_string())
        .event(ev.payload.kind())
        .data(serde_json::to_string(ev).expect("event serializes"))
}

async fn events(State(app): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = app.bridge.subscribe();
    let (tx, out) = tokio::sync::mpsc::channel::<BridgeEvent>(64);
    // The bridge channel is blocking; a small pump thread bridges it into
    // the async world and quits once either side goes away.
    std::thread::spawn(move || loop {
        match rx.recv_timeout(Duration::from_millis(250)) {
            Ok(ev) => {
                if tx.blocking_send(ev).is_err() {
                    return;
                }
            }
            Err(RecvTimeoutError::Timeout) if !tx.is_closed() => {}
            Err(_) => return,
        }
    });
    let stream = futures::stream::unfold(out, |mut out| async move {
        let ev = out.recv().await?;
        Some((Ok(sse_event(&ev)), out))
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    app: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(app)).with_graceful_shutdown(shutdown).await
}

/// Builds the service state, re-plugging whatever `state_file` records.
pub fn restore(bridge: Bridge, state_file: Option<&FsPath>) -> std::io::Result<AppState> {
    if let Some(p) = state_file {
        for (port, e) in PortFile::load(p)?.restore(&bridge, Duration::from_secs(30)) {
            eprintln!("warning: port {port}: {e}");
        }
    }
    Ok(AppState {
        bridge,
        state_file: state_file.map(FsPath::to_path_buf),
    })
}
