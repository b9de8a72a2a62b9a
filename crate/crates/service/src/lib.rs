//! HTTP front end for the one-image-per-epoch feedback loop.
//!
//! All model state lives on a single worker thread. Handlers translate
//! requests into commands, send them over a channel and await the reply, so
//! at most one command touches the session at a time.
//!
//! | Method | Path | |
//! |---|---|---|
//! | `POST` | `/api/v1/session` | start the session (503 if one is active) |
//! | `DELETE` | `/api/v1/session/{id}` | end it |
//! | `GET` | `/api/v1/session/{id}/sample` | current image as base64 RGB8 rows |
//! | `POST` | `/api/v1/session/{id}/feedback` | mask bytes (0/1/2), raw or `{"mask": base64}` |
//! | `POST` | `/api/v1/session/{id}/step` | one fine-tuning epoch on the pending mask |
//! | `GET` | `/api/v1/session/{id}/history` | epoch records so far |
//! | `GET` | `/healthz` | build info |

mod wire;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use pxpo_core::harness::{RunDir, Session, TrainConfig};
use pxpo_core::net::DenoiserParams;
use tokio::sync::oneshot;

pub use wire::{FeedbackBody, FeedbackAck, HealthView, RecordView, SampleView, SessionView};

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("no session with id {0:?}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<pxpo_core::Error> for ApiError {
    fn from(e: pxpo_core::Error) -> Self {
        use pxpo_core::Error as E;
        match e {
            E::Protocol(m) => ApiError::BadRequest(m),
            E::Usage(m) => ApiError::Conflict(m),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}

/// What the service trains and where it writes.
#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub train: TrainConfig,
    pub params: DenoiserParams,
    /// Each session gets `session-N/` here with checkpoints and a reward CSV.
    pub run_root: Option<PathBuf>,
}

enum Command {
    Create,
    End(String),
    Sample(String),
    Feedback(String, Vec<u8>),
    Step(String),
    History(String),
}

enum Reply {
    Session(SessionView),
    Sample(SampleView),
    Ack(FeedbackAck),
    Record(RecordView),
    History(Vec<RecordView>),
}

type Job = (Command, oneshot::Sender<Result<Reply, ApiError>>);

struct Worker {
    cfg: ServiceConfig,
    session: Option<Session>,
    created: usize,
}

impl Worker {
    fn session(&mut self, id: &str) -> Result<&mut Session, ApiError> {
        match &mut self.session {
            Some(s) if s.id == id => Ok(s),
            _ => Err(ApiError::NotFound(id.to_string())),
        }
    }

    fn handle(&mut self, cmd: Command) -> Result<Reply, ApiError> {
        match cmd {
            Command::Create => {
                if let Some(s) = &self.session {
                    return Err(ApiError::Unavailable(format!(
                        "session {} is active; only one session at a time",
                        s.id
                    )));
                }
                self.created += 1;
                let id = format!("session-{}", self.created);
                let dir = match &self.cfg.run_root {
                    Some(root) => Some(RunDir::create(root.join(&id))?),
                    None => None,
                };
                let s = Session::new(id, self.cfg.train.clone(), self.cfg.params.clone(), dir)?;
                log::info!("started {}", s.id);
                let view = SessionView::of(&s);
                self.session = Some(s);
                Ok(Reply::Session(view))
            }
            Command::End(id) => {
                let view = SessionView::of(self.session(&id)?);
                self.session = None;
                Ok(Reply::Session(view))
            }
            Command::Sample(id) => Ok(Reply::Sample(SampleView::of(self.session(&id)?)?)),
            Command::Feedback(id, mask) => {
                let s = self.session(&id)?;
                s.submit_feedback(&mask)?;
                Ok(Reply::Ack(FeedbackAck {
                    session: id,
                    epoch: s.epoch(),
                    pending: true,
                }))
            }
            Command::Step(id) => {
                let s = self.session(&id)?;
                let record = s.step().map_err(|e| {
                    log::warn!("step failed, session state kept: {e}");
                    ApiError::from(e)
                })?;
                Ok(Reply::Record(RecordView::from(&record)))
            }
            Command::History(id) => Ok(Reply::History(
                self.session(&id)?.history().iter().map(RecordView::from).collect(),
            )),
        }
    }
}

struct AppState {
    jobs: Mutex<mpsc::Sender<Job>>,
    stepping: AtomicBool,
}

impl AppState {
    async fn call(&self, cmd: Command) -> Result<Reply, ApiError> {
        let (tx, rx) = oneshot::channel();
        self.jobs
            .lock()
            .expect("job queue lock")
            .send((cmd, tx))
            .map_err(|_| ApiError::Internal("training worker has stopped".into()))?;
        rx.await
            .map_err(|_| ApiError::Internal("training worker dropped the request".into()))?
    }
}

/// Builds the router and starts its training worker thread.
pub fn router(cfg: ServiceConfig) -> Router {
    let (tx, rx) = mpsc::channel::<Job>();
    std::thread::Builder::new()
        .name("pxpo-trainer".into())
        .spawn(move || {
            let mut worker = Worker {
                cfg,
                session: None,
                created: 0,
            };
            for (cmd, reply) in rx {
                let _ = reply.send(worker.handle(cmd));
            }
        })
        .expect("spawn training worker");
    let state = Arc::new(AppState {
        jobs: Mutex::new(tx),
        stepping: AtomicBool::new(false),
    });
    Router::new()
        .route("/healthz", get(health))
        .route("/api/v1/session", post(create))
        .route("/api/v1/session/:id", axum::routing::delete(end))
        .route("/api/v1/session/:id/sample", get(sample))
        .route("/api/v1/session/:id/feedback", post(feedback))
        .route("/api/v1/session/:id/step", post(step))
        .route("/api/v1/session/:id/history", get(history))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(cfg: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(cfg)).await
}

type St = State<Arc<AppState>>;

async fn health() -> Json<HealthView> {
    Json(HealthView {
        status: "ok",
        name: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
    })
}

async fn create(State(st): St) -> Result<Json<SessionView>, ApiError> {
    match st.call(Command::Create).await? {
        Reply::Session(v) => Ok(Json(v)),
        _ => unreachable!(),
    }
}

async fn end(State(st): St, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    match st.call(Command::End(id)).await? {
        Reply::Session(v) => Ok(Json(v)),
        _ => unreachable!(),
    }
}

async fn sample(State(st): St, Path(id): Path<String>) -> Result<Json<SampleView>, ApiError> {
    match st.call(Command::Sample(id)).await? {
        Reply::Sample(v) => Ok(Json(v)),
        _ => unreachable!(),
    }
}

/// Extracts mask bytes from a feedback request body: raw bytes, or
/// `{"mask": "<base64>"}` when `content_type` is JSON.
pub fn decode_feedback(content_type: Option<&str>, body: &[u8]) -> Result<Vec<u8>, ApiError> {
    if !content_type.is_some_and(|v| v.starts_with("application/json")) {
        return Ok(body.to_vec());
    }
    let parsed: FeedbackBody = serde_json::from_slice(body)
        .map_err(|e| ApiError::BadRequest(format!("invalid feedback JSON: {e}")))?;
    base64::engine::general_purpose::STANDARD
        .decode(parsed.mask)
        .map_err(|e| ApiError::BadRequest(format!("mask is not base64: {e}")))
}

async fn feedback(
    State(st): St,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<FeedbackAck>, ApiError> {
    if st.stepping.load(Ordering::SeqCst) {
        return Err(ApiError::Conflict("a training step is in progress".into()));
    }
    let content_type = headers.get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok());
    let mask = decode_feedback(content_type, &body)?;
    match st.call(Command::Feedback(id, mask)).await? {
        Reply::Ack(v) => Ok(Json(v)),
        _ => unreachable!(),
    }
}

async fn step(State(st): St, Path(id): Path<String>) -> Result<Json<RecordView>, ApiError> {
    if st.stepping.swap(true, Ordering::SeqCst) {
        return Err(ApiError::Conflict("a training step is already in progress".into()));
    }
    let out = st.call(Command::Step(id)).await;
    st.stepping.store(false, Ordering::SeqCst);
    match out? {
        Reply::Record(v) => Ok(Json(v)),
        _ => unreachable!(),
    }
}

async fn history(State(st): St, Path(id): Path<String>) -> Result<Json<Vec<RecordView>>, ApiError> {
    match st.call(Command::History(id)).await? {
        Reply::History(v) => Ok(Json(v)),
        _ => unreachable!(),
    }
}
