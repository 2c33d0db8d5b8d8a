//! HTTP front end for an interactive active-learning run.
//!
//! The server owns one [`Session`]: the controller, its pool and the queue of
//! samples awaiting labels. Annotators read `/api/queue` and post to
//! `/api/labels`; once the round's quota is filled the controller fine-tunes
//! on a blocking worker thread while reads keep being served from the last
//! consistent snapshot.
//!
//! | Method | Path            | Body / query         |
//! |--------|-----------------|----------------------|
//! | GET    | `/api/status`   |                      |
//! | GET    | `/api/queue`    | `?limit=n`           |
//! | POST   | `/api/labels`   | [`LabelSubmission`]  |
//! | GET    | `/api/history`  |                      |
//!
//! Ground-truth labels stored in the pool never leave the process.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Json;
pub use axum::Router;
use serde::{Deserialize, Serialize};

use evidal_core::active::{ActiveLearner, QueryStrategy, RoundRecord};
use evidal_core::datagen::PoolDataset;
use evidal_core::network::predict_samples;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AwaitingLabels,
    Training,
    Finished,
    Failed,
}

/// One sample waiting for a label, with the current model's opinion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub sample_id: usize,
    pub features: Vec<f64>,
    /// First two feature coordinates, for scatter display.
    pub display: [f64; 2],
    pub belief: Vec<f64>,
    pub uncertainty: f64,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSubmission {
    pub sample_id: usize,
    pub label: i64,
    #[serde(default)]
    pub annotator: Option<String>,
    #[serde(default)]
    pub timestamp: Option<String>,
    /// When present, must name the round currently awaiting labels.
    #[serde(default)]
    pub round: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAccepted {
    pub accepted: bool,
    pub quota_remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub round: usize,
    pub labels_fraction: f64,
    pub quota_remaining: usize,
    #[serde(rename = "K")]
    pub num_classes: usize,
    pub phase: Phase,
    pub strategy: QueryStrategy,
    pub total_rounds: usize,
    pub last_round: Option<RoundRecord>,
    pub error: Option<String>,
}

/// An accepted label, kept for the audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedLabel {
    pub sample_id: usize,
    pub label: usize,
    pub annotator: Option<String>,
    pub timestamp: Option<String>,
    pub round: usize,
}

/// The attached run.
#[derive(Debug)]
pub struct Session {
    pool: Arc<PoolDataset>,
    learner: ActiveLearner,
    phase: Phase,
    queue: Vec<QueueItem>,
    /// Labels received this round, by sample id.
    pending: BTreeMap<usize, usize>,
    log: Vec<AcceptedLabel>,
    error: Option<String>,
}

impl Session {
    pub fn new(pool: PoolDataset, learner: ActiveLearner) -> evidal_core::Result<Self> {
        let mut session = Self {
            pool: Arc::new(pool),
            learner,
            phase: Phase::AwaitingLabels,
            queue: Vec::new(),
            pending: BTreeMap::new(),
            log: Vec::new(),
            error: None,
        };
        session.refresh_queue()?;
        Ok(session)
    }

    fn refresh_queue(&mut self) -> evidal_core::Result<()> {
        self.pending.clear();
        if self.learner.is_finished() {
            self.queue.clear();
            self.phase = Phase::Finished;
            return Ok(());
        }
        let ids = self.learner.pending_query(&self.pool)?.ids;
        let inputs: Vec<(usize, &[f64], Option<usize>)> =
            ids.iter().map(|&id| (id, self.pool.features(id), None)).collect();
        let round = self.learner.state().round + 1;
        self.queue = predict_samples(self.learner.model(), &inputs)?
            .into_iter()
            .map(|p| {
                let features = self.pool.features(p.sample_id).to_vec();
                let display = [features.first().copied().unwrap_or(0.0), features.get(1).copied().unwrap_or(0.0)];
                QueueItem {
                    sample_id: p.sample_id,
                    features,
                    display,
                    belief: p.opinion.belief.clone(),
                    uncertainty: p.uncertainty(),
                    round,
                }
            })
            .collect();
        self.phase = Phase::AwaitingLabels;
        Ok(())
    }

    pub fn learner(&self) -> &ActiveLearner {
        &self.learner
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn accepted_labels(&self) -> &[AcceptedLabel] {
        &self.log
    }

    fn quota_remaining(&self) -> usize {
        match self.phase {
            Phase::AwaitingLabels => self.queue.len() - self.pending.len(),
            _ => 0,
        }
    }

    fn status(&self) -> Status {
        let state = self.learner.state();
        Status {
            round: state.round,
            labels_fraction: state.labels_fraction(),
            quota_remaining: self.quota_remaining(),
            num_classes: self.pool.num_classes,
            phase: self.phase,
            strategy: self.learner.config().strategy,
            total_rounds: self.learner.config().total_rounds(),
            last_round: state.history.last().cloned(),
            error: self.error.clone(),
        }
    }
}

/// Shared server state; cheap to clone.
#[derive(Clone, Default)]
pub struct AppState {
    inner: Arc<Mutex<Option<Session>>>,
}

impl AppState {
    pub fn detached() -> Self {
        Self::default()
    }

    pub fn attached(session: Session) -> Self {
        let s = Self::default();
        s.attach(session);
        s
    }

    pub fn attach(&self, session: Session) {
        *self.lock() = Some(session);
    }

    fn lock(&self) -> MutexGuard<'_, Option<Session>> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Runs `f` on the attached session, if any.
    pub fn with_session<T>(&self, f: impl FnOnce(&Session) -> T) -> Option<T> {
        self.lock().as_ref().map(f)
    }
}

#[derive(Debug)]
struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn detached() -> ApiError {
    ApiError(StatusCode::SERVICE_UNAVAILABLE, "no active-learning run attached".into())
}

fn conflict(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::CONFLICT, msg.into())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/status", get(status))
        .route("/api/queue", get(queue))
        .route("/api/labels", post(labels))
        .route("/api/history", get(history))
        .with_state(state)
}

/// Serves the API on `listener` until the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Serves `app` until `shutdown` resolves, then drains open connections.
pub async fn serve_with_shutdown(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

async fn status(State(state): State<AppState>) -> Result<Json<Status>, ApiError> {
    state.with_session(Session::status).map(Json).ok_or_else(detached)
}

#[derive(Debug, Deserialize)]
struct QueueParams {
    limit: Option<usize>,
}

async fn queue(State(state): State<AppState>, Query(params): Query<QueueParams>) -> Result<Json<Vec<QueueItem>>, ApiError> {
    let guard = state.lock();
    let session = guard.as_ref().ok_or_else(detached)?;
    if session.phase != Phase::AwaitingLabels {
        return Err(conflict(format!("no round is awaiting labels (phase {:?})", session.phase)));
    }
    let limit = params.limit.unwrap_or(usize::MAX);
    let items = session.queue.iter().filter(|q| !session.pending.contains_key(&q.sample_id)).take(limit).cloned().collect();
    Ok(Json(items))
}

async fn history(State(state): State<AppState>) -> Result<Json<Vec<RoundRecord>>, ApiError> {
    state.with_session(|s| s.learner.history().to_vec()).map(Json).ok_or_else(detached)
}

async fn labels(State(state): State<AppState>, body: Bytes) -> Result<Json<LabelAccepted>, ApiError> {
    let sub: LabelSubmission = serde_json::from_slice(&body)
        .map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("malformed submission: {e}")))?;
    let mut guard = state.lock();
    let session = guard.as_mut().ok_or_else(detached)?;
    if session.phase != Phase::AwaitingLabels {
        return Err(conflict(format!("labels are not being accepted (phase {:?})", session.phase)));
    }
    let round = session.learner.state().round + 1;
    if sub.round.is_some_and(|r| r != round) {
        return Err(conflict(format!("round {} is not the open round {round}", sub.round.unwrap_or_default())));
    }
    let k = session.pool.num_classes;
    let label = usize::try_from(sub.label)
        .ok()
        .filter(|&l| l < k)
        .ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, format!("label {} outside [0, {k})", sub.label)))?;
    if !session.queue.iter().any(|q| q.sample_id == sub.sample_id) {
        return Err(conflict(format!("sample {} is not queued in round {round}", sub.sample_id)));
    }
    if session.pending.contains_key(&sub.sample_id) {
        return Err(conflict(format!("sample {} is already labeled", sub.sample_id)));
    }
    session.pending.insert(sub.sample_id, label);
    session.log.push(AcceptedLabel {
        sample_id: sub.sample_id,
        label,
        annotator: sub.annotator,
        timestamp: sub.timestamp,
        round,
    });
    let quota_remaining = session.quota_remaining();
    if quota_remaining == 0 {
        start_training(&state, session);
    }
    Ok(Json(LabelAccepted { accepted: true, quota_remaining }))
}

/// Fine-tunes a copy of the controller off the async runtime and swaps it
/// in when done. Reads keep seeing the pre-round snapshot meanwhile.
fn start_training(state: &AppState, session: &mut Session) {
    session.phase = Phase::Training;
    let ids: Vec<usize> = session.queue.iter().map(|q| q.sample_id).collect();
    let labels: Vec<usize> = ids.iter().map(|id| session.pending[id]).collect();
    let mut learner = session.learner.clone();
    let pool = Arc::clone(&session.pool);
    let state = state.clone();
    tokio::task::spawn_blocking(move || {
        let outcome = learner.complete_round(&pool, &ids, &labels).map(|_| ());
        let mut guard = state.lock();
        let Some(session) = guard.as_mut() else { return };
        match outcome {
            Ok(()) => {
                session.learner = learner;
                if let Err(e) = session.refresh_queue() {
                    session.phase = Phase::Failed;
                    session.error = Some(e.to_string());
                }
            }
            Err(e) => {
                session.phase = Phase::Failed;
                session.error = Some(e.to_string());
            }
        }
    });
}
