// SPDX-License-Identifier: Apache-2.0

//! JSON API under `/v1`, with the event log exposed as server-sent events.

use std::collections::BTreeSet;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use fleetflow::agent::AgentService;
use fleetflow::bus::{BusError, EventBus};
use fleetflow::config::Config;
use fleetflow::experiments::{run_experiment, ExperimentError, ExperimentSpec};
use fleetflow::limits::{Limits, OwnerQuota};
use fleetflow::model::{AgentTask, EventKind, ModelError, TaskSpec, Trajectory};
use fleetflow::persistence::{ArtifactStore, MetadataStore, StoreError};
use fleetflow::policy::{ConstantPolicy, ModelService, PolicyContext, PolicyError, RandomPolicy, ScriptedPolicy};
use fleetflow::runtime::{Driver, LocalRuntime, SimRuntime};
use fleetflow::scheduler::ControlError;
use fleetflow::time::{Clock, WallClock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Backend {
    Sim,
    Local,
}

pub struct AppState {
    pub driver: Mutex<Box<dyn Driver>>,
    pub bus: EventBus,
    pub artifacts: Arc<ArtifactStore>,
    pub limits: Arc<Limits>,
    pub model: Arc<ModelService>,
    pub experiments_dir: PathBuf,
    clock: WallClock,
    run_lock: tokio::sync::Mutex<()>,
    shutdown: AtomicBool,
}

impl AppState {
    /// Wires a driver, model service and rollout factory from `cfg`.
    pub fn build(cfg: &Config, backend: Backend, scripts: Option<ScriptedPolicy>) -> anyhow::Result<Arc<Self>> {
        let (store, artifacts, experiments_dir) = match &cfg.gateway.data_dir {
            Some(dir) => (
                MetadataStore::open(dir.join("metadata.jsonl"))?,
                ArtifactStore::open(dir.join("artifacts"))?,
                dir.join("experiments"),
            ),
            None => (MetadataStore::new(), ArtifactStore::in_memory(), std::env::temp_dir().join("fleetflow-experiments")),
        };
        let (store, artifacts) = (Arc::new(store), Arc::new(artifacts));
        let limits = Arc::new(cfg.build_limits());
        let mut model = ModelService::new(limits.clone(), artifacts.clone(), "gateway")
            .with_policy("random", Arc::new(RandomPolicy::default()))
            .with_policy("never-finish", Arc::new(ConstantPolicy::never_finish()));
        if let Some(s) = scripts {
            model.register("scripted", Arc::new(s));
        }
        let model = Arc::new(model);
        let mut driver: Box<dyn Driver> = match backend {
            Backend::Sim => Box::new(SimRuntime::build(cfg.sim.clone(), cfg.scheduler_config(), limits.clone(), store)),
            Backend::Local => Box::new(LocalRuntime::build(cfg.local_config(), cfg.scheduler_config(), limits.clone(), store)),
        };
        let round_ms = if backend == Backend::Sim { 30_000 } else { 0 };
        AgentService::new(model.clone(), artifacts.clone()).with_round_ms(round_ms).attach(driver.as_mut());
        let bus = driver.control().bus().clone();
        Ok(Arc::new(Self {
            driver: Mutex::new(driver),
            bus,
            artifacts,
            limits,
            model,
            experiments_dir,
            clock: WallClock::new(),
            run_lock: tokio::sync::Mutex::new(()),
            shutdown: AtomicBool::new(false),
        }))
    }

    /// Background loop advancing the control plane. Stops with [`Self::stop`].
    pub fn spawn_driver(self: &Arc<Self>) -> std::thread::JoinHandle<()> {
        let state = self.clone();
        std::thread::spawn(move || {
            let mut seen = state.bus.last_seq();
            while !state.shutdown.load(Ordering::Relaxed) {
                state.bus.wait_beyond(seen + 1, Duration::from_millis(20));
                seen = state.bus.last_seq();
                state.driver.lock().tick();
            }
        })
    }

    pub fn stop(&self) {
        self.shutdown.store(true, Ordering::Relaxed);
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(|| async { Json(json!({"ok": true})) }))
        .route("/v1/tasks", post(submit_task).get(list_tasks))
        .route("/v1/tasks/{id}", get(get_task))
        .route("/v1/tasks/{id}/cancel", post(cancel_task))
        .route("/v1/instances", get(list_instances))
        .route("/v1/events", get(stream_events))
        .route("/v1/artifacts/{*key}", get(get_artifact))
        .route("/v1/admin/quota", get(get_quotas))
        .route("/v1/admin/quota/{owner}", put(set_quota))
        .route("/v1/infer", post(infer))
        .route("/v1/experiments", post(start_experiment))
        .with_state(state)
}

/// Errors as `{"error": kind, "message": ...}` with a matching status.
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
    retry_after_ms: Option<u64>,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self { status, kind, message: message.into(), retry_after_ms: None }
    }

    fn not_found(what: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NotFound", format!("unknown {what}"))
    }

    fn schema(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "SchemaViolation", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut resp = (self.status, Json(json!({"error": self.kind, "message": self.message}))).into_response();
        if let Some(ms) = self.retry_after_ms {
            let secs = ms.div_ceil(1000).max(1);
            resp.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(secs));
        }
        resp
    }
}

impl From<ControlError> for ApiError {
    fn from(e: ControlError) -> Self {
        match e {
            ControlError::Invalid(ModelError::IllegalTransition { .. }) => {
                ApiError::new(StatusCode::CONFLICT, "IllegalTransition", e.to_string())
            }
            ControlError::Invalid(_) => ApiError::schema(e.to_string()),
            ControlError::NotFound(id) => ApiError::not_found(&format!("task {id}")),
            ControlError::VersionConflict { .. } => ApiError::new(StatusCode::CONFLICT, "VersionConflict", e.to_string()),
            ControlError::Store(StoreError::VersionConflict { .. }) => {
                ApiError::new(StatusCode::CONFLICT, "VersionConflict", e.to_string())
            }
            ControlError::Store(_) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Store", e.to_string()),
        }
    }
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::schema(e.to_string()))
}

#[derive(Serialize, Deserialize)]
pub struct Submitted {
    pub task_id: String,
}

async fn submit_task(State(s): State<Arc<AppState>>, body: Bytes) -> Result<(StatusCode, Json<Submitted>), ApiError> {
    let spec: TaskSpec = parse_json(&body)?;
    let task_id = s.driver.lock().submit(spec)?;
    Ok((StatusCode::ACCEPTED, Json(Submitted { task_id })))
}

/// A task as seen by API clients. Submissions still in transit to the
/// control plane are reported as queued with no record yet.
#[derive(Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub status: String,
    pub version: u64,
    pub record: Option<fleetflow::model::TaskRecord>,
}

async fn get_task(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<TaskView>, ApiError> {
    let driver = s.driver.lock();
    match driver.control().get_task_detail(&id) {
        Some(d) => Ok(Json(TaskView {
            task_id: id,
            status: format!("{:?}", d.record.status),
            version: d.version,
            record: Some(d.record),
        })),
        None if driver.is_pending(&id) => {
            Ok(Json(TaskView { task_id: id, status: "Queued".into(), version: 0, record: None }))
        }
        None => Err(ApiError::not_found(&format!("task {id}"))),
    }
}

#[derive(Serialize)]
struct TaskSummary {
    task_id: String,
    status: String,
    attempt: u32,
}

async fn list_tasks(State(s): State<Arc<AppState>>) -> Json<Vec<TaskSummary>> {
    let driver = s.driver.lock();
    Json(
        driver
            .control()
            .tasks()
            .map(|t| TaskSummary { task_id: t.task_id.clone(), status: format!("{:?}", t.status), attempt: t.attempt })
            .collect(),
    )
}

#[derive(Deserialize, Default)]
struct CancelBody {
    expected_version: Option<u64>,
}

async fn cancel_task(State(s): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Result<Json<TaskView>, ApiError> {
    let req: CancelBody = if body.is_empty() { CancelBody::default() } else { parse_json(&body)? };
    let mut driver = s.driver.lock();
    let rec = driver.cancel(&id, req.expected_version)?;
    let version = driver.control().get_task_detail(&id).map(|d| d.version).unwrap_or(0);
    Ok(Json(TaskView { task_id: id, status: format!("{:?}", rec.status), version, record: Some(rec) }))
}

async fn list_instances(State(s): State<Arc<AppState>>) -> Json<Vec<fleetflow::model::InstanceDescriptor>> {
    Json(s.driver.lock().control().instances().cloned().collect())
}

#[derive(Deserialize)]
struct EventQuery {
    from_seq: Option<u64>,
    /// Comma-separated event kinds; all kinds when absent.
    kinds: Option<String>,
}

fn parse_kinds(raw: Option<&str>) -> Result<BTreeSet<EventKind>, ApiError> {
    let Some(raw) = raw else { return Ok(EventKind::ALL.into_iter().collect()) };
    raw.split(',')
        .filter(|k| !k.is_empty())
        .map(|k| serde_json::from_value::<EventKind>(json!(k)).map_err(|_| ApiError::schema(format!("unknown event kind {k}"))))
        .collect()
}

/// Replays from `from_seq` (or after `Last-Event-ID`), then follows the log.
async fn stream_events(
    State(s): State<Arc<AppState>>,
    Query(q): Query<EventQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<SseEvent, Infallible>>>, ApiError> {
    let resume = headers.get("last-event-id").and_then(|v| v.to_str().ok()).and_then(|v| v.parse::<u64>().ok()).map(|v| v + 1);
    let from = resume.or(q.from_seq).unwrap_or(1).max(1);
    let kinds = parse_kinds(q.kinds.as_deref())?;
    if let Err(BusError::SeqTruncated { horizon, .. }) = s.bus.fetch(from, &kinds, 1) {
        return Err(ApiError::new(StatusCode::GONE, "SeqTruncated", format!("oldest retained seq is {horizon}")));
    }
    let bus = s.bus.clone();
    let batches = stream::unfold((bus, from), move |(bus, cursor)| {
        let kinds = kinds.clone();
        async move {
            loop {
                let last = bus.last_seq();
                if last >= cursor {
                    let events = match bus.fetch(cursor, &kinds, 1024) {
                        Ok(evs) => evs,
                        Err(_) => return None,
                    };
                    let next = events.last().map(|e| e.seq + 1).unwrap_or(last + 1);
                    if !events.is_empty() {
                        return Some((events, (bus, next)));
                    }
                    return Some((Vec::new(), (bus, next)));
                }
                let b = bus.clone();
                let _ = tokio::task::spawn_blocking(move || b.wait_beyond(cursor, Duration::from_secs(1))).await;
            }
        }
    });
    let events = batches.flat_map(|batch| {
        stream::iter(batch.into_iter().map(|ev| {
            let data = serde_json::to_string(&ev).expect("events serialize");
            let kind = serde_json::to_value(ev.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
            Ok(SseEvent::default().id(ev.seq.to_string()).event(kind).data(data))
        }))
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

async fn get_artifact(State(s): State<Arc<AppState>>, Path(key): Path<String>) -> Result<Response, ApiError> {
    match s.artifacts.get_artifact(&key) {
        Ok(bytes) => {
            let ctype = if key.ends_with(".json") {
                "application/json"
            } else if key.ends_with(".jsonl") {
                "application/x-ndjson"
            } else {
                "application/octet-stream"
            };
            Ok(([(header::CONTENT_TYPE, ctype)], bytes).into_response())
        }
        Err(StoreError::KeyNotFound(_)) => Err(ApiError::not_found(&format!("artifact {key}"))),
        Err(StoreError::InvalidKey(k)) => Err(ApiError::schema(format!("invalid key {k}"))),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Store", e.to_string())),
    }
}

async fn get_quotas(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::to_value(s.limits.quota.snapshot()).unwrap_or_default())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QuotaBody {
    instance_hours: Option<f64>,
    max_in_flight: Option<u32>,
}

async fn set_quota(State(s): State<Arc<AppState>>, Path(owner): Path<String>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let q: QuotaBody = parse_json(&body)?;
    if q.instance_hours.is_some_and(|h| !(h.is_finite() && h >= 0.0)) {
        return Err(ApiError::schema("instance_hours must be non-negative"));
    }
    s.limits.quota.set_quota(&owner, OwnerQuota { instance_hours: q.instance_hours, max_in_flight: q.max_in_flight });
    Ok(Json(serde_json::to_value(s.limits.quota.usage(&owner)).unwrap_or_default()))
}

#[derive(Deserialize)]
struct InferBody {
    policy_id: String,
    #[serde(default = "default_owner")]
    owner: String,
    task: AgentTask,
    #[serde(default)]
    trajectory: Trajectory,
    #[serde(default)]
    seed: u64,
}

fn default_owner() -> String {
    "default".into()
}

/// Proxies one inference call through the tier-1 gate, in wall time.
async fn infer(State(s): State<Arc<AppState>>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let req: InferBody = parse_json(&body)?;
    let ctx = PolicyContext { task: &req.task, trajectory: &req.trajectory, params_version: s.model.params().version, seed: req.seed };
    match s.model.infer(&req.policy_id, &req.owner, &ctx, s.clock.now()) {
        Ok(inf) => Ok(Json(json!({"distribution": inf.distribution, "latency_ms": inf.latency_ms}))),
        Err(PolicyError::RateLimited(ms)) => Err(ApiError {
            retry_after_ms: Some(ms),
            ..ApiError::new(StatusCode::TOO_MANY_REQUESTS, "RateLimited", format!("retry after {ms} ms"))
        }),
        Err(PolicyError::UnknownPolicy(p)) => Err(ApiError::not_found(&format!("policy {p}"))),
        Err(e) => Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "PolicyError", e.to_string())),
    }
}

/// Runs an experiment to completion; one at a time per process.
async fn start_experiment(State(s): State<Arc<AppState>>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let spec: ExperimentSpec = parse_json(&body)?;
    let Ok(guard) = s.run_lock.try_lock() else {
        return Err(ApiError::new(StatusCode::CONFLICT, "RunInProgress", "another experiment is running"));
    };
    let dir = s.experiments_dir.join(format!("{}-{}-{}", spec.experiment, spec.strategy, spec.seed));
    let run = tokio::task::spawn_blocking(move || run_experiment(&spec, &dir)).await;
    drop(guard);
    match run {
        Ok(Ok(report)) => Ok(Json(serde_json::to_value(report).unwrap_or_default())),
        Ok(Err(e @ ExperimentError::FleetCapExceeded { .. })) | Ok(Err(e @ ExperimentError::Invalid(_))) => {
            Err(ApiError::schema(e.to_string()))
        }
        Ok(Err(e)) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Experiment", e.to_string())),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Experiment", e.to_string())),
    }
}

/// One-line description for the `serve` startup log.
pub fn describe(cfg: &Config, backend: Backend) -> String {
    match backend {
        Backend::Sim => format!("simulated {} fleet (cap {})", cfg.sim.strategy, cfg.sim.fleet_cap),
        Backend::Local => "local subprocess backend".to_string(),
    }
}

