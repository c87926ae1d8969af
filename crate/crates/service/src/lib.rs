//! HTTP service for human hypothesis selection.
//!
//! A running stage publishes its candidate pairs through [`HumanSelector`];
//! annotators fetch tickets and post choices over the JSON API, and the
//! stage resumes once every pair has an answer.

pub mod log;
pub mod session;

use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hypsel_core::feedback::{word_error_rate, Selection};
use hypsel_core::trainer::{PairContext, Selector};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::log::SelectionLog;
use crate::session::{Choice, PairItem, Session, SessionStatus};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("no interactive stage is active")]
    NoActiveStage,
    #[error("unknown ticket {0}")]
    UnknownTicket(String),
    #[error("ticket {0} has expired")]
    ExpiredTicket(String),
    #[error("ticket {0} was already answered")]
    AlreadyAnswered(String),
    #[error("selection log: {0}")]
    CorruptLog(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::NoActiveStage => "no_active_stage",
            ServiceError::UnknownTicket(_) => "unknown_ticket",
            ServiceError::ExpiredTicket(_) => "expired_ticket",
            ServiceError::AlreadyAnswered(_) => "already_answered",
            ServiceError::CorruptLog(_) => "corrupt_log",
            ServiceError::Io(_) => "io",
        }
    }

    pub fn status_code(&self) -> StatusCode {
        match self {
            ServiceError::NoActiveStage | ServiceError::AlreadyAnswered(_) => StatusCode::CONFLICT,
            ServiceError::UnknownTicket(_) => StatusCode::NOT_FOUND,
            ServiceError::ExpiredTicket(_) => StatusCode::GONE,
            ServiceError::CorruptLog(_) | ServiceError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.kind(), "message": self.to_string() });
        (self.status_code(), Json(body)).into_response()
    }
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub lease: Duration,
    /// Include reference-based progress in `/api/status`.
    pub debug: bool,
    /// Directory of the append-only selection log; `None` keeps answers in memory only.
    pub log_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            lease: Duration::from_secs(120),
            debug: false,
            log_dir: None,
            seed: 1,
        }
    }
}

/// State shared by the HTTP handlers and the blocked trainer thread.
pub struct ServiceState {
    config: ServiceConfig,
    session: Mutex<Option<Session>>,
    changed: Condvar,
}

impl ServiceState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(ServiceState {
            config,
            session: Mutex::new(None),
            changed: Condvar::new(),
        })
    }

    fn lock(&self) -> MutexGuard<'_, Option<Session>> {
        self.session.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Installs the pairs of `stage` as the active session.
    pub fn open_stage(&self, stage: usize, items: Vec<PairItem>) -> Result<(), ServiceError> {
        let log = match &self.config.log_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(SelectionLog::open(&dir.join(format!("selections_stage_{stage}.jsonl")))?)
            }
            None => None,
        };
        let session = Session::new(stage, items, self.config.lease, self.config.seed, log);
        ::log::info!(
            "stage {stage}: {} pairs open for selection, {} already answered",
            session.total(),
            session.total() - session.remaining()
        );
        *self.lock() = Some(session);
        self.changed.notify_all();
        Ok(())
    }

    pub fn close_stage(&self) {
        *self.lock() = None;
        self.changed.notify_all();
    }

    pub fn next_pair(&self) -> Result<Option<session::PairTicket>, ServiceError> {
        let mut guard = self.lock();
        let session = guard.as_mut().ok_or(ServiceError::NoActiveStage)?;
        Ok(session.next_pair(Instant::now()))
    }

    pub fn submit(&self, ticket: &str, choice: Choice, annotator: Option<&str>) -> Result<session::Ack, ServiceError> {
        let mut guard = self.lock();
        let session = guard.as_mut().ok_or(ServiceError::NoActiveStage)?;
        let ack = session.submit(ticket, choice, annotator, Instant::now())?;
        drop(guard);
        self.changed.notify_all();
        Ok(ack)
    }

    pub fn status(&self) -> SessionStatus {
        self.lock()
            .as_ref()
            .map_or_else(SessionStatus::inactive, |s| s.status(self.config.debug))
    }

    /// Blocks until the active session is complete and returns its
    /// selections, or gives up after `timeout`.
    pub fn wait_for_selections(&self, timeout: Option<Duration>) -> Result<Vec<Selection>, String> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut guard = self.lock();
        loop {
            match guard.as_ref() {
                None => return Err("the stage was closed before all pairs were answered".into()),
                Some(s) if s.is_complete() => {
                    return s.selections().ok_or_else(|| "incomplete selections".to_string());
                }
                Some(_) => {}
            }
            guard = match deadline {
                None => self.changed.wait(guard).unwrap_or_else(|e| e.into_inner()),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err("timed out waiting for selections".into());
                    }
                    self.changed
                        .wait_timeout(guard, d - now)
                        .unwrap_or_else(|e| e.into_inner())
                        .0
                }
            };
        }
    }
}

/// [`Selector`] whose answers come from annotators through the service.
pub struct HumanSelector {
    pub state: Arc<ServiceState>,
    /// How long a stage waits for all answers; `None` waits forever.
    pub timeout: Option<Duration>,
}

impl Selector for HumanSelector {
    fn select(&mut self, stage: usize, pairs: &[PairContext<'_>]) -> hypsel_core::Result<Vec<Selection>> {
        let items = pairs
            .iter()
            .map(|c| {
                let wer = |words: &[usize]| word_error_rate(words, &c.utterance.reference).map(|w| w.wer);
                Ok(PairItem {
                    utterance_id: c.pair.utterance_id.clone(),
                    candidate1: c.pair.candidate1.words.clone(),
                    candidate2: c.pair.candidate2.words.clone(),
                    oracle_wers: Some((wer(&c.pair.candidate1.words)?, wer(&c.pair.candidate2.words)?)),
                })
            })
            .collect::<hypsel_core::Result<Vec<_>>>()?;
        self.state
            .open_stage(stage, items)
            .map_err(|e| hypsel_core::Error::SelectorInterrupted { stage, reason: e.to_string() })?;
        let result = self.state.wait_for_selections(self.timeout);
        self.state.close_stage();
        result.map_err(|reason| hypsel_core::Error::SelectorInterrupted { stage, reason })
    }
}

#[derive(Debug, Deserialize)]
pub struct SelectionBody {
    pub choice: Choice,
}

#[derive(Debug, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PairResponse {
    Pair { ticket: session::PairTicket },
    Exhausted,
}

async fn get_session(State(state): State<Arc<ServiceState>>) -> Json<serde_json::Value> {
    let status = state.status();
    Json(json!({
        "active": status.active,
        "stage": status.stage,
        "total": status.total,
        "lease_seconds": state.config.lease.as_secs(),
    }))
}

async fn get_pair(State(state): State<Arc<ServiceState>>) -> Result<Json<PairResponse>, ServiceError> {
    Ok(Json(match state.next_pair()? {
        Some(ticket) => PairResponse::Pair { ticket },
        None => PairResponse::Exhausted,
    }))
}

async fn post_selection(
    State(state): State<Arc<ServiceState>>,
    Path(ticket): Path<String>,
    headers: HeaderMap,
    Json(body): Json<SelectionBody>,
) -> Result<Json<session::Ack>, ServiceError> {
    let annotator = headers.get("x-annotator").and_then(|v| v.to_str().ok());
    Ok(Json(state.submit(&ticket, body.choice, annotator)?))
}

async fn get_status(State(state): State<Arc<ServiceState>>) -> Json<SessionStatus> {
    Json(state.status())
}

/// API routes, plus the UI bundle under `/` when `static_dir` is given.
pub fn router(state: Arc<ServiceState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/session", get(get_session))
        .route("/api/pair", get(get_pair))
        .route("/api/pair/{ticket}/selection", post(post_selection))
        .route("/api/status", get(get_status))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves `router` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    router: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router).with_graceful_shutdown(shutdown).await
}
