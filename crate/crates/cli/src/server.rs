//! JSON-over-HTTP API under `/v1/`.
//!
//! Runs execute asynchronously: `POST /v1/sessions/{id}/run` answers 202 with
//! a run number and token, and `GET /v1/sessions/{id}/runs/{n}` polls. Adding
//! `?wait=true` to the POST blocks until the run finishes. Runs of one session
//! are queued and executed in order.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::rejection::{PathRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Path, Query, Request, State};
use axum::http::{HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, Notify};

use causerank_core::engine::{EngineError, ForkOverrides, PseudocauseKind, RunReport, Session, SessionSpec, Workspace};
use causerank_core::ingest::{parse_records, Format};
use causerank_core::{ModelError, ScoringError, TimeIndex};
use causerank_core::query::QueryError;

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

/// Dataset uploads can be large; the limit only guards against runaway clients.
pub const MAX_BODY_BYTES: usize = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<serde_json::Value>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        let code = match status {
            StatusCode::BAD_REQUEST => "bad-request",
            StatusCode::NOT_FOUND => "not-found",
            StatusCode::CONFLICT => "conflict",
            StatusCode::UNPROCESSABLE_ENTITY => "invalid-hypothesis",
            _ => "internal",
        };
        ApiError {
            status: status.as_u16(),
            code: code.to_string(),
            message: message.into(),
            detail: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::NotFound(_) | EngineError::NotScored(_) | EngineError::Model(ModelError::UnknownFamily(_)) => StatusCode::NOT_FOUND,
            EngineError::Conflict(_) | EngineError::Model(ModelError::DuplicateFamily(_)) | EngineError::Query(QueryError::DuplicateFamilyKey(_)) => {
                StatusCode::CONFLICT
            }
            EngineError::InvalidHypothesis(_) | EngineError::InvalidOverride(_) | EngineError::Model(ModelError::OverlappingMetrics { .. }) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            EngineError::Io(_) | EngineError::Corrupt(_) | EngineError::Scoring(ScoringError::NumericalFailure(_)) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Ranked entry as shown in result tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub family: String,
    pub score: f64,
    pub p_value: f64,
}

fn entries(report: &RunReport) -> Vec<Entry> {
    report
        .ranked
        .entries
        .iter()
        .map(|e| Entry {
            family: e.family().to_string(),
            score: e.score,
            p_value: e.p_value,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunView {
    pub run: usize,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entries: Vec<Entry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<RunReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session: Session,
    pub runs: Vec<RunSummary>,
    /// Run numbers queued or executing.
    pub pending: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Slot {
    Running,
    /// Number under which the report was stored.
    Done(usize),
    Failed(ApiError),
}

#[derive(Default)]
struct RunTable {
    slots: HashMap<(String, usize), Slot>,
    tokens: HashMap<(String, String), usize>,
    pending: HashMap<String, usize>,
}

struct Job {
    run: usize,
    token: String,
}

pub struct AppState {
    ws: Workspace,
    runs: Mutex<RunTable>,
    queues: Mutex<HashMap<String, mpsc::UnboundedSender<Job>>>,
    session_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    finished: Notify,
    tokens: AtomicU64,
}

impl AppState {
    pub fn new(ws: Workspace) -> Arc<Self> {
        Arc::new(AppState {
            ws,
            runs: Mutex::new(RunTable::default()),
            queues: Mutex::new(HashMap::new()),
            session_locks: Mutex::new(HashMap::new()),
            finished: Notify::new(),
            tokens: AtomicU64::new(0),
        })
    }

    fn session_lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.session_locks.lock().expect("lock poisoned").entry(id.to_string()).or_default().clone()
    }
}

/// Runs blocking workspace work off the async executor.
async fn blocking<T: Send + 'static>(state: &Arc<AppState>, f: impl FnOnce(&Workspace) -> Result<T, EngineError> + Send + 'static) -> ApiResult<T> {
    let state = state.clone();
    tokio::task::spawn_blocking(move || f(&state.ws))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

fn parse_optional_body<T: DeserializeOwned + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        Ok(T::default())
    } else {
        parse_body(body)
    }
}

async fn echo_idempotency(request: Request, next: Next) -> Response {
    let key = request.headers().get(IDEMPOTENCY_HEADER).cloned();
    let mut response = next.run(request).await;
    if let Some(k) = key {
        response.headers_mut().insert(IDEMPOTENCY_HEADER, k);
    }
    response
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/datasets", post(post_dataset))
        .route("/v1/datasets/{id}", get(get_dataset))
        .route("/v1/datasets/{id}/queries", post(post_query))
        .route("/v1/tables/{id}", get(get_table))
        .route("/v1/sessions", post(post_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/run", post(post_run))
        .route("/v1/sessions/{id}/runs/{n}", get(get_run))
        .route("/v1/sessions/{id}/plots/{*family}", get(get_plot))
        .route("/v1/sessions/{id}/fork", post(post_fork))
        .route("/v1/sessions/{id}/pseudocause", post(post_pseudocause))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "no such endpoint") })
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(middleware::from_fn(echo_idempotency))
        .with_state(state)
}

pub async fn serve(ws: Workspace, listen: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(listen).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(ws)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug, Default, Deserialize)]
struct FormatParam {
    format: Option<String>,
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> ApiResult<T> {
    q.map(|Query(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn path<T>(p: Result<Path<T>, PathRejection>) -> ApiResult<T> {
    p.map(|Path(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

async fn post_dataset(State(state): State<Arc<AppState>>, q: Result<Query<FormatParam>, QueryRejection>, body: Bytes) -> ApiResult<Response> {
    let q = query(q)?;
    let format: Format = q.format.as_deref().unwrap_or("jsonl").parse().map_err(|e| ApiError::bad_request(format!("{e}")))?;
    let parsed = parse_records(&body, format).map_err(|e| ApiError::bad_request(e.to_string()))?;
    if parsed.records.is_empty() {
        return Err(ApiError::bad_request("dataset has no records"));
    }
    let meta = blocking(&state, move |ws| ws.add_dataset(&parsed.records)).await?;
    Ok((StatusCode::CREATED, Json(meta)).into_response())
}

async fn get_dataset(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let meta = blocking(&state, move |ws| ws.dataset(&id)).await?;
    Ok(Json(meta).into_response())
}

#[derive(Debug, Deserialize)]
struct QueryRequest {
    query: String,
    #[serde(default)]
    index: Option<TimeIndex>,
}

async fn post_query(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: QueryRequest = parse_body(&body)?;
    let meta = blocking(&state, move |ws| ws.add_query(&id, &req.query, req.index)).await?;
    Ok((StatusCode::CREATED, Json(meta)).into_response())
}

async fn get_table(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let meta = blocking(&state, move |ws| ws.table_meta(&id)).await?;
    Ok(Json(meta).into_response())
}

async fn post_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let spec: SessionSpec = parse_body(&body)?;
    let session = blocking(&state, move |ws| ws.create_session(spec)).await?;
    Ok((StatusCode::CREATED, Json(session)).into_response())
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let sid = id.clone();
    let session = blocking(&state, move |ws| ws.session(&sid)).await?;
    let runs = session
        .runs
        .iter()
        .enumerate()
        .map(|(i, r)| RunSummary {
            run: i + 1,
            entries: entries(r),
        })
        .collect();
    let mut pending: Vec<usize> = {
        let table = state.runs.lock().expect("lock poisoned");
        table
            .slots
            .iter()
            .filter(|((s, _), slot)| *s == id && matches!(slot, Slot::Running))
            .map(|((_, n), _)| *n)
            .collect()
    };
    pending.sort_unstable();
    Ok(Json(SessionView { session, runs, pending }).into_response())
}

#[derive(Debug, Default, Deserialize)]
struct RunRequest {
    #[serde(default)]
    token: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct WaitParam {
    #[serde(default)]
    wait: bool,
}

async fn run_view(state: &Arc<AppState>, id: &str, run: usize, token: Option<String>) -> ApiResult<Response> {
    let slot = state.runs.lock().expect("lock poisoned").slots.get(&(id.to_string(), run)).cloned();
    match slot {
        Some(Slot::Running) => Ok((
            StatusCode::ACCEPTED,
            Json(RunView {
                run,
                status: Status::Running,
                token,
                entries: Vec::new(),
                report: None,
                error: None,
            }),
        )
            .into_response()),
        Some(Slot::Failed(e)) => {
            let status = StatusCode::from_u16(e.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            let view = RunView {
                run,
                status: Status::Failed,
                token,
                entries: Vec::new(),
                report: None,
                error: Some(e),
            };
            Ok((status, Json(view)).into_response())
        }
        done => {
            let stored = match done {
                Some(Slot::Done(n)) => n,
                _ => run,
            };
            let sid = id.to_string();
            let report = blocking(state, move |ws| ws.report(&sid, stored)).await?;
            Ok(Json(RunView {
                run,
                status: Status::Done,
                token,
                entries: entries(&report),
                report: Some(report),
                error: None,
            })
            .into_response())
        }
    }
}

fn worker(state: Arc<AppState>, id: String) -> mpsc::UnboundedSender<Job> {
    let (tx, mut rx) = mpsc::unbounded_channel::<Job>();
    tokio::spawn(async move {
        while let Some(job) = rx.recv().await {
            let lock = state.session_lock(&id);
            let guard = lock.lock().await;
            let (sid, token) = (id.clone(), job.token.clone());
            let result = blocking(&state, move |ws| ws.run(&sid, Some(&token))).await;
            drop(guard);
            {
                let mut table = state.runs.lock().expect("lock poisoned");
                let slot = match result {
                    Ok((stored, _)) => Slot::Done(stored),
                    Err(e) => Slot::Failed(e),
                };
                table.slots.insert((id.clone(), job.run), slot);
                if let Some(p) = table.pending.get_mut(&id) {
                    *p = p.saturating_sub(1);
                }
            }
            state.finished.notify_waiters();
        }
    });
    tx
}

async fn post_run(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    wait: Result<Query<WaitParam>, QueryRejection>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let wait = query(wait)?;
    let req: RunRequest = parse_optional_body(&body)?;
    let token = req
        .token
        .or_else(|| headers.get(IDEMPOTENCY_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string))
        .unwrap_or_else(|| format!("auto-{}-{}", std::process::id(), state.tokens.fetch_add(1, Ordering::Relaxed)));

    let known = state.runs.lock().expect("lock poisoned").tokens.get(&(id.clone(), token.clone())).copied();
    let run = match known {
        Some(n) => n,
        None => {
            let (sid, tok) = (id.clone(), token.clone());
            let (persisted, session) = blocking(&state, move |ws| Ok((ws.run_for_token(&sid, &tok)?, ws.session(&sid)?))).await?;
            if let Some(n) = persisted {
                return run_view(&state, &id, n, Some(token)).await;
            }
            let mut table = state.runs.lock().expect("lock poisoned");
            // a concurrent request with the same token may have won the race
            if let Some(&n) = table.tokens.get(&(id.clone(), token.clone())) {
                n
            } else {
                let pending = table.pending.entry(id.clone()).or_default();
                let n = session.runs.len() + *pending + 1;
                *pending += 1;
                table.slots.insert((id.clone(), n), Slot::Running);
                table.tokens.insert((id.clone(), token.clone()), n);
                drop(table);
                let mut queues = state.queues.lock().expect("lock poisoned");
                let tx = queues.entry(id.clone()).or_insert_with(|| worker(state.clone(), id.clone()));
                if tx.send(Job { run: n, token: token.clone() }).is_err() {
                    let fresh = worker(state.clone(), id.clone());
                    fresh.send(Job { run: n, token: token.clone() }).map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "run queue closed"))?;
                    *tx = fresh;
                }
                n
            }
        }
    };
    if wait.wait {
        loop {
            let notified = state.finished.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            let running = matches!(state.runs.lock().expect("lock poisoned").slots.get(&(id.clone(), run)), Some(Slot::Running));
            if !running {
                break;
            }
            notified.await;
        }
    }
    run_view(&state, &id, run, Some(token)).await
}

async fn get_run(State(state): State<Arc<AppState>>, p: Result<Path<(String, usize)>, PathRejection>) -> ApiResult<Response> {
    let (id, run) = path(p)?;
    run_view(&state, &id, run, None).await
}

async fn get_plot(State(state): State<Arc<AppState>>, Path((id, family)): Path<(String, String)>) -> ApiResult<Response> {
    let plot = blocking(&state, move |ws| ws.plot(&id, &family)).await?;
    Ok(Json(plot).into_response())
}

async fn post_fork(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let overrides: ForkOverrides = parse_optional_body(&body)?;
    let child = blocking(&state, move |ws| ws.fork(&id, overrides)).await?;
    Ok((StatusCode::CREATED, Json(child)).into_response())
}

#[derive(Debug, Deserialize)]
struct PseudocauseRequest {
    /// Defaults to the session target.
    #[serde(default)]
    source: Option<String>,
    #[serde(flatten)]
    kind: PseudocauseKind,
}

async fn post_pseudocause(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: PseudocauseRequest = parse_body(&body)?;
    let lock = state.session_lock(&id);
    let _guard = lock.lock().await;
    let pc = blocking(&state, move |ws| {
        let source = match req.source {
            Some(s) => s,
            None => ws.session(&id)?.target,
        };
        ws.add_pseudocause(&id, &source, req.kind)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(pc)).into_response())
}
