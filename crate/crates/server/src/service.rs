//! HTTP API. Each session owns one worker (engine plus transcript) behind
//! an async mutex: `step`, `autorun` and `import` are refused with 409
//! while another mutation holds it, `reset` cancels a running autorun at
//! the next step boundary and then waits its turn. Engine events are
//! numbered per session, kept for replay and broadcast to every open
//! event stream.

use std::collections::HashMap;
use std::convert::Infallible;
use std::path::{Path as FsPath, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use nbagent_core::assets::{export_markdown, export_notebook, load_run, save_run, AssetsDir, AssetsError};
use nbagent_core::domain::{ProjectSpec, RunConfig, Session, SharedClock, SystemClock};
use nbagent_core::{Engine, EngineEvent, StepError};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{broadcast, OwnedMutexGuard};
use tokio_stream::wrappers::BroadcastStream;

use crate::config::ServiceConfig;
use crate::diagnostics::run_diagnostics;
use crate::runner::{self, RUN_JSON, RUN_MARKDOWN, RUN_NOTEBOOK};

/// A numbered event as stored for replay.
#[derive(Debug, Clone)]
pub struct StoredEvent {
    pub id: u64,
    pub name: String,
    pub data: String,
}

/// Per-session event history plus live fan-out.
pub struct EventLog {
    history: Mutex<Vec<StoredEvent>>,
    live: broadcast::Sender<StoredEvent>,
}

impl EventLog {
    fn new() -> Self {
        Self {
            history: Mutex::new(Vec::new()),
            live: broadcast::channel(1024).0,
        }
    }

    fn push(&self, name: &str, data: String) {
        let mut history = self.history.lock().expect("event log");
        let event = StoredEvent {
            id: history.len() as u64 + 1,
            name: name.to_string(),
            data,
        };
        history.push(event.clone());
        // Sending under the lock keeps live order equal to id order.
        let _ = self.live.send(event);
    }

    fn push_engine(&self, event: &EngineEvent) {
        let value = serde_json::to_value(event).expect("event serializes");
        let name = value["event"].as_str().unwrap_or("event").to_string();
        self.push(&name, value.to_string());
    }

    /// Events after `last_id` plus a receiver for everything later.
    fn subscribe(&self, last_id: u64) -> (Vec<StoredEvent>, broadcast::Receiver<StoredEvent>) {
        let history = self.history.lock().expect("event log");
        let receiver = self.live.subscribe();
        let backlog = history.iter().filter(|e| e.id > last_id).cloned().collect();
        (backlog, receiver)
    }
}

struct Worker {
    engine: Engine,
    session: Session,
}

struct SessionSlot {
    worker: Arc<tokio::sync::Mutex<Worker>>,
    /// The transcript readable while a step is in flight. Engine events
    /// are applied to it before they are broadcast, so a client never sees
    /// an event the snapshot does not yet reflect.
    snapshot: Arc<Mutex<Session>>,
    events: Arc<EventLog>,
    assets: Arc<AssetsDir>,
    /// Bumped by reset; an autorun stops when it changes.
    generation: AtomicU64,
}

impl SessionSlot {
    fn publish(&self, session: &Session) {
        *self.snapshot.lock().expect("snapshot") = session.clone();
    }

    fn snapshot(&self) -> Session {
        self.snapshot.lock().expect("snapshot").clone()
    }
}

fn apply_event(session: &mut Session, event: &EngineEvent) {
    match event {
        EngineEvent::CellAdded { cell } => session.cells.push(cell.clone()),
        EngineEvent::CellUpdated { cell } => {
            if let Some(slot) = session.cells.iter_mut().find(|c| c.id == cell.id) {
                *slot = cell.clone();
            }
        }
        EngineEvent::Trace { record } => session.trace.push(record.clone()),
        EngineEvent::Status { status, step_count } => {
            session.status = *status;
            session.step_count = *step_count;
        }
        EngineEvent::Reset => session.reset(),
    }
}

pub struct AppState {
    config: ServiceConfig,
    clock: SharedClock,
    sessions: RwLock<HashMap<String, Arc<SessionSlot>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Self::with_clock(config, Arc::new(SystemClock))
    }

    pub fn with_clock(config: ServiceConfig, clock: SharedClock) -> Arc<Self> {
        Arc::new(Self {
            config,
            clock,
            sessions: RwLock::new(HashMap::new()),
        })
    }

    fn slot(&self, id: &str) -> Result<Arc<SessionSlot>, ApiError> {
        self.sessions
            .read()
            .expect("sessions")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session {id}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn busy() -> Self {
        Self::new(StatusCode::CONFLICT, "another operation is in progress on this session")
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<AssetsError> for ApiError {
    fn from(e: AssetsError) -> Self {
        match e {
            AssetsError::SchemaViolation { path, reason } => Self {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                body: json!({ "error": format!("{path}: {reason}"), "path": path }),
            },
            AssetsError::VersionUnknown(v) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, format!("unknown format_version {v}"))
            }
            other => Self::internal(other),
        }
    }
}

fn step_error(e: StepError) -> ApiError {
    let status = match &e {
        StepError::LimitReached(_) | StepError::NotRunnable(_) => StatusCode::CONFLICT,
        StepError::ActionParseFailure(_) | StepError::Gateway(_) => StatusCode::BAD_GATEWAY,
        StepError::Sandbox(_) => StatusCode::SERVICE_UNAVAILABLE,
    };
    ApiError::new(status, e.to_string())
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/:id", get(get_session))
        .route("/sessions/:id/step", post(step))
        .route("/sessions/:id/autorun", post(autorun))
        .route("/sessions/:id/reset", post(reset))
        .route("/sessions/:id/import", post(import))
        .route("/sessions/:id/export", get(export))
        .route("/sessions/:id/events", get(events))
        .route("/sessions/:id/assets", get(list_assets))
        .route("/sessions/:id/assets/*path", get(get_asset))
        .route("/diagnostics", get(diagnostics))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn run_file_json(session: &Session) -> Value {
    serde_json::from_slice(&save_run(session)).expect("run file is JSON")
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(base), Value::Object(overlay)) => {
            for (key, value) in overlay {
                merge(base.entry(key).or_insert(Value::Null), value);
            }
        }
        (base, overlay) => *base = overlay,
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    spec: ProjectSpec,
    /// Partial run config laid over the service defaults.
    #[serde(default)]
    config: Option<Value>,
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let request: CreateRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("invalid request: {e}")))?;
    let mut config = serde_json::to_value(app.config.session_defaults()).expect("config serializes");
    if let Some(overlay) = request.config {
        merge(&mut config, overlay);
    }
    let config: RunConfig = serde_json::from_value(config)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("config: {e}")))?;
    let session = Session::new(request.spec, config)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let id = session.session_id.clone();

    let events = Arc::new(EventLog::new());
    let snapshot = Arc::new(Mutex::new(session.clone()));
    let (sink, mirror) = (Arc::clone(&events), Arc::clone(&snapshot));
    let forward: Box<dyn FnMut(&EngineEvent) + Send> = Box::new(move |event| {
        apply_event(&mut mirror.lock().expect("snapshot"), event);
        sink.push_engine(event);
    });
    let prepared = {
        let app = Arc::clone(&app);
        let session = session.clone();
        tokio::task::spawn_blocking(move || {
            runner::prepare(&app.config, &session, Arc::clone(&app.clock), Some(forward))
        })
        .await
        .map_err(ApiError::internal)?
        .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, format!("{e:#}")))?
    };
    let slot = Arc::new(SessionSlot {
        snapshot,
        worker: Arc::new(tokio::sync::Mutex::new(Worker {
            engine: prepared.engine,
            session,
        })),
        events,
        assets: prepared.assets,
        generation: AtomicU64::new(0),
    });
    app.sessions.write().expect("sessions").insert(id.clone(), slot);
    log::info!("created session {id}");
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))).into_response())
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = app.slot(&id)?;
    Ok(Json(run_file_json(&slot.snapshot())))
}

fn try_worker(slot: &SessionSlot) -> ApiResult<OwnedMutexGuard<Worker>> {
    Arc::clone(&slot.worker).try_lock_owned().map_err(|_| ApiError::busy())
}

async fn step(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = app.slot(&id)?;
    let mut worker = try_worker(&slot)?;
    let result = tokio::task::spawn_blocking(move || {
        let Worker { engine, session } = &mut *worker;
        let result = engine.step(session);
        slot.publish(session);
        result
    })
    .await
    .map_err(ApiError::internal)?;
    let outcome = result.map_err(step_error)?;
    Ok(Json(serde_json::to_value(outcome).expect("outcome serializes")))
}

async fn autorun(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let slot = app.slot(&id)?;
    let mut worker = try_worker(&slot)?;
    let generation = slot.generation.load(Ordering::SeqCst);
    tokio::task::spawn_blocking(move || {
        let Worker { engine, session } = &mut *worker;
        let cancelled = || slot.generation.load(Ordering::SeqCst) != generation;
        loop {
            if cancelled() || session.status.is_terminal() {
                break;
            }
            let result = engine.step(session);
            slot.publish(session);
            match result {
                Ok(outcome) if outcome.halted => break,
                Ok(_) => {}
                Err(StepError::LimitReached(_)) => break,
                Err(e) => {
                    log::warn!("autorun of {} stopped: {e}", session.session_id);
                    slot.events.push(
                        "error",
                        json!({ "event": "error", "message": e.to_string() }).to_string(),
                    );
                    break;
                }
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "started": true }))).into_response())
}

async fn reset(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = app.slot(&id)?;
    slot.generation.fetch_add(1, Ordering::SeqCst);
    let mut worker = Arc::clone(&slot.worker).lock_owned().await;
    let session = tokio::task::spawn_blocking(move || {
        let Worker { engine, session } = &mut *worker;
        let result = engine.reset(session);
        slot.publish(session);
        result.map(|()| session.clone())
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(step_error)?;
    Ok(Json(run_file_json(&session)))
}

async fn import(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let slot = app.slot(&id)?;
    let mut imported = load_run(&body)?;
    imported.session_id = id;
    let mut worker = try_worker(&slot)?;
    let session = tokio::task::spawn_blocking(move || {
        let Worker { engine, session } = &mut *worker;
        // Clears the interpreter; the imported cells do not re-run.
        engine.reset(session)?;
        *session = imported;
        engine.resume(session, false)?;
        slot.publish(session);
        slot.events.push(
            "imported",
            json!({ "event": "imported", "session": run_file_json(session) }).to_string(),
        );
        Ok::<_, StepError>(session.clone())
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(step_error)?;
    Ok(Json(run_file_json(&session)))
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn export(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<ExportQuery>,
) -> ApiResult<Response> {
    let slot = app.slot(&id)?;
    let session = slot.snapshot();
    let (file_name, content_type, bytes) = match query.format.as_deref().unwrap_or("json") {
        "json" => (RUN_JSON, "application/json", save_run(&session)),
        "md" => (
            RUN_MARKDOWN,
            "text/markdown; charset=utf-8",
            export_markdown(&session).into_bytes(),
        ),
        "ipynb" => (RUN_NOTEBOOK, "application/x-ipynb+json", export_notebook(&session)),
        other => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                format!("unknown format {other:?} (expected json, md or ipynb)"),
            ))
        }
    };
    slot.assets.write_export(file_name, &bytes)?;
    let disposition = format!("attachment; filename=\"{file_name}\"");
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static(content_type)),
            (
                header::CONTENT_DISPOSITION,
                HeaderValue::from_str(&disposition).expect("ascii"),
            ),
        ],
        bytes,
    )
        .into_response())
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    after: Option<u64>,
}

async fn events(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let slot = app.slot(&id)?;
    let last_id = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse().ok())
        .or(query.after)
        .unwrap_or(0);
    let (backlog, receiver) = slot.events.subscribe(last_id);
    let mut seen = backlog.last().map_or(last_id, |e| e.id);
    let live = BroadcastStream::new(receiver).filter_map(move |item| {
        let fresh = match item {
            Ok(event) if event.id > seen => {
                seen = event.id;
                Some(event)
            }
            // A lagging client reconnects with Last-Event-ID.
            _ => None,
        };
        std::future::ready(fresh)
    });
    let stream = stream::iter(backlog)
        .chain(live)
        .map(|e| Ok(Event::default().id(e.id.to_string()).event(e.name).data(e.data)));
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

fn content_type_for(path: &FsPath) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("svg") => "image/svg+xml",
        Some("webp") => "image/webp",
        Some("json") => "application/json",
        Some("ipynb") => "application/x-ipynb+json",
        Some("md") => "text/markdown; charset=utf-8",
        Some("csv") => "text/csv; charset=utf-8",
        Some("txt" | "log" | "ndjson") => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

fn walk(root: &FsPath, dir: &FsPath, out: &mut Vec<Value>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        let name = entry.file_name();
        if name.to_string_lossy().starts_with('.') {
            continue;
        }
        let meta = entry.metadata()?;
        let rel = path
            .strip_prefix(root)
            .expect("under root")
            .to_string_lossy()
            .replace('\\', "/");
        if meta.is_dir() {
            out.push(json!({ "path": rel, "kind": "dir" }));
            walk(root, &path, out)?;
        } else {
            out.push(json!({ "path": rel, "kind": "file", "size": meta.len() }));
        }
    }
    Ok(())
}

async fn list_assets(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = app.slot(&id)?;
    let root: PathBuf = slot.assets.root().to_path_buf();
    let entries = tokio::task::spawn_blocking(move || {
        let mut out = Vec::new();
        walk(&root, &root, &mut out).map(|()| out)
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(ApiError::internal)?;
    Ok(Json(json!({ "entries": entries })))
}

async fn get_asset(State(app): State<Arc<AppState>>, Path((id, rel)): Path<(String, String)>) -> ApiResult<Response> {
    let slot = app.slot(&id)?;
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, format!("no asset {rel}"));
    let path = slot.assets.resolve(&rel).ok_or_else(not_found)?;
    let bytes = tokio::task::spawn_blocking({
        let path = path.clone();
        move || std::fs::read(path)
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(|_| not_found())?;
    Ok(([(header::CONTENT_TYPE, content_type_for(&path))], bytes).into_response())
}

async fn diagnostics(State(app): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let report = tokio::task::spawn_blocking(move || run_diagnostics(&app.config))
        .await
        .map_err(ApiError::internal)?;
    let mut value = serde_json::to_value(&report).expect("report serializes");
    value["ok"] = report.all_ok().into();
    Ok(Json(value))
}
