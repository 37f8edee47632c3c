//! HTTP/JSON front end for a live audit. Every endpoint is a facade over
//! one `AuditState` operation; the state file is the only persistence.

mod error;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::header::{AUTHORIZATION, CONTENT_TYPE};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bayes_audit::audit::{AuditState, OpenSelection, PlanRequest, RoundReport};
use bayes_audit::election::Interpretation;
use bayes_audit::parallel::Execution;
use bayes_audit::planner::AllocationPlan;
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, OwnedMutexGuard, RwLock};

pub use error::{ApiError, ErrorBody};

pub const OPERATOR_HEADER: &str = "x-operator-token";

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub state_path: PathBuf,
    /// Without a token the service only answers reads.
    pub operator_token: Option<String>,
    pub execution: Execution,
}

impl ServiceConfig {
    pub fn new(state_path: impl Into<PathBuf>, operator_token: Option<String>) -> Self {
        Self {
            state_path: state_path.into(),
            operator_token,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum JobStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Job {
    pub id: u64,
    pub kind: String,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<RoundReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SelectionsResponse {
    pub round: u32,
    pub selections: Vec<OpenSelection>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RecordResponse {
    pub recorded: usize,
    pub pending_selections: usize,
}

struct Shared {
    config: ServiceConfig,
    state: RwLock<AuditState>,
    /// Held for the whole of any mutation, including a round-close job.
    writer: Arc<Mutex<()>>,
    jobs: std::sync::Mutex<BTreeMap<u64, Job>>,
    next_job: AtomicU64,
}

type AppState = Arc<Shared>;

/// Loads the state file and builds the router.
pub fn router(config: ServiceConfig) -> Result<Router, ApiError> {
    let state = AuditState::load(&config.state_path)?;
    let shared = Arc::new(Shared {
        config,
        state: RwLock::new(state),
        writer: Arc::new(Mutex::new(())),
        jobs: std::sync::Mutex::new(BTreeMap::new()),
        next_job: AtomicU64::new(1),
    });
    Ok(Router::new()
        .route("/status", get(status))
        .route("/selections", get(selections))
        .route("/interpretations", post(interpretations))
        .route("/round/close", post(close_round))
        .route("/jobs/{id}", get(job))
        .route("/export", get(export))
        .route("/plan", post(plan))
        .with_state(shared))
}

pub async fn serve(config: ServiceConfig, bind: SocketAddr) -> Result<(), ApiError> {
    let app = router(config)?;
    let listener = tokio::net::TcpListener::bind(bind).await.map_err(bayes_audit::AuditError::from)?;
    axum::serve(listener, app).await.map_err(bayes_audit::AuditError::from)?;
    Ok(())
}

fn presented_token(headers: &HeaderMap) -> Option<&str> {
    if let Some(v) = headers.get(OPERATOR_HEADER).and_then(|v| v.to_str().ok()) {
        return Some(v);
    }
    headers
        .get(AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
}

/// Checks the operator token and claims the writer lock without waiting.
fn begin_mutation(shared: &Shared, headers: &HeaderMap) -> Result<OwnedMutexGuard<()>, ApiError> {
    let expected = shared.config.operator_token.as_deref().ok_or(ApiError::ReadOnly)?;
    if presented_token(headers) != Some(expected) {
        return Err(ApiError::Forbidden);
    }
    shared.writer.clone().try_lock_owned().map_err(|_| ApiError::Busy)
}

fn json_body<T>(body: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    body.map(|Json(v)| v).map_err(|e| ApiError::BadBody(e.body_text()))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Task(e.to_string()))?
}

async fn status(State(shared): State<AppState>) -> Response {
    Json(shared.state.read().await.status()).into_response()
}

async fn selections(State(shared): State<AppState>) -> Json<SelectionsResponse> {
    let state = shared.state.read().await;
    Json(SelectionsResponse {
        round: state.rounds.last().map_or(0, |r| r.number),
        selections: state.open_selections(),
    })
}

async fn interpretations(
    State(shared): State<AppState>,
    headers: HeaderMap,
    body: Result<Json<Vec<Interpretation>>, JsonRejection>,
) -> Result<Json<RecordResponse>, ApiError> {
    let _writer = begin_mutation(&shared, &headers)?;
    let entries = json_body(body)?;
    let mut next = shared.state.read().await.clone();
    let path = shared.config.state_path.clone();
    let (next, recorded) = blocking(move || {
        let recorded = next.record_interpretations(&entries)?;
        next.save(&path)?;
        Ok((next, recorded))
    })
    .await?;
    let pending = next.status().pending_selections;
    *shared.state.write().await = next;
    Ok(Json(RecordResponse {
        recorded,
        pending_selections: pending,
    }))
}

/// Starts a round close in the background and returns its job. The state
/// changes only once the whole close has succeeded and been saved.
async fn close_round(
    State(shared): State<AppState>,
    headers: HeaderMap,
) -> Result<(StatusCode, Json<Job>), ApiError> {
    let writer = begin_mutation(&shared, &headers)?;
    let snapshot = shared.state.read().await.clone();
    if !snapshot.status().round_open {
        return Err(bayes_audit::AuditError::NoOpenRound.into());
    }
    let missing: Vec<String> = snapshot
        .open_selections()
        .into_iter()
        .filter(|s| !s.recorded)
        .map(|s| s.ballot.address.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(bayes_audit::AuditError::RoundIncomplete(missing).into());
    }
    let id = shared.next_job.fetch_add(1, Ordering::Relaxed);
    let job = job_stub(id);
    shared.jobs.lock().unwrap().insert(id, job.clone());

    let task_shared = shared.clone();
    tokio::spawn(async move {
        let _writer = writer;
        let path = task_shared.config.state_path.clone();
        let execution = task_shared.config.execution;
        let mut next = snapshot;
        let outcome = blocking(move || {
            let report = next.close_round_with(execution)?;
            next.save(&path)?;
            Ok((next, report))
        })
        .await;
        let finished = match outcome {
            Ok((next, report)) => {
                *task_shared.state.write().await = next;
                Job { status: JobStatus::Succeeded, report: Some(report), ..job_stub(id) }
            }
            Err(e) => Job { status: JobStatus::Failed, error: Some(e.body()), ..job_stub(id) },
        };
        task_shared.jobs.lock().unwrap().insert(id, finished);
    });
    Ok((StatusCode::ACCEPTED, Json(job)))
}

fn job_stub(id: u64) -> Job {
    Job {
        id,
        kind: "roundClose".to_owned(),
        status: JobStatus::Running,
        report: None,
        error: None,
    }
}

async fn job(State(shared): State<AppState>, Path(id): Path<u64>) -> Result<Json<Job>, ApiError> {
    let jobs = shared.jobs.lock().unwrap();
    jobs.get(&id).cloned().map(Json).ok_or(ApiError::UnknownJob(id))
}

async fn export(State(shared): State<AppState>) -> Response {
    let body = shared.state.read().await.export();
    ([(CONTENT_TYPE, "application/json")], body).into_response()
}

async fn plan(
    State(shared): State<AppState>,
    body: Result<Json<PlanRequest>, JsonRejection>,
) -> Result<Json<AllocationPlan>, ApiError> {
    let request = json_body(body)?;
    let snapshot = shared.state.read().await.clone();
    let plan = blocking(move || Ok(snapshot.plan(&request)?)).await?;
    Ok(Json(plan))
}
