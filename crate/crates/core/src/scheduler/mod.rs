// SPDX-License-Identifier: Apache-2.0

//! The control plane: FIFO admission through the limit tiers, placement on
//! ephemeral or pooled instances, and event-driven completion handling.
//!
//! The control plane is a synchronous state machine. It never waits: it
//! reacts to bus events and re-runs the dispatch cycle, so the same code
//! drives the simulator in virtual time and real subprocesses in wall time.

mod pool;

pub use pool::{InstancePool, PoolPick};

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{EventBus, Subscription};
use crate::env::{Assignment, ComputeBackend, ProvisionRequest, TaskProgram, Workload};
use crate::limits::{Admission, LimitError, Limits};
use crate::model::{
    transition_task_state, Event, EventKind, EventPayload, ExecutionMode, InstanceDescriptor, InstanceState, ModelError,
    ResourceProfile, TaskOutcome, TaskRecord, TaskSpec, TaskStatus, WorkloadSpec,
};
use crate::persistence::{MetadataStore, StoreError, TaskQueue};
use crate::time::{ms_to_hours, Millis};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub retry_max: u32,
    pub pool_max: u32,
    pub mode_default: ExecutionMode,
    pub profile: ResourceProfile,
    /// Instance-hours reserved against an owner's quota at admission; the
    /// mean execution time by default.
    pub quota_estimate_hours: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            retry_max: 3,
            pool_max: 16,
            mode_default: ExecutionMode::Ephemeral,
            profile: ResourceProfile::standard(),
            quota_estimate_hours: crate::env::ExecutionModel::default().mean_min / 60.0,
        }
    }
}

/// A task bound to a Running instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchDecision {
    pub task_id: String,
    pub attempt: u32,
    pub enqueue_seq: u64,
    pub instance_id: String,
    pub mode: ExecutionMode,
    pub decided_at: Millis,
    /// Last bus seq the control plane had processed when deciding.
    pub observed_seq: u64,
}

/// A task leaving the queue through admission, in dequeue order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmissionRecord {
    pub task_id: String,
    pub enqueue_seq: u64,
    pub at: Millis,
}

/// Builds the program for `WorkloadSpec::Rollout` tasks.
pub trait ProgramFactory: Send + Sync {
    fn build(&self, rec: &TaskRecord) -> Result<Box<dyn TaskProgram>, String>;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error(transparent)]
    Invalid(#[from] ModelError),
    #[error("unknown task {0}")]
    NotFound(String),
    #[error("version conflict: expected {expected}, current {actual}")]
    VersionConflict { expected: u64, actual: u64 },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDetail {
    pub record: TaskRecord,
    pub version: u64,
    pub instance: Option<InstanceDescriptor>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlStats {
    pub events_handled: u64,
    pub duplicates_ignored: u64,
    pub retries: u64,
    pub provision_failures: u64,
    pub max_executing: u64,
}

struct TaskEntry {
    rec: TaskRecord,
    version: u64,
    admission: Option<Admission>,
}

struct InstanceEntry {
    desc: InstanceDescriptor,
    version: u64,
    /// Tasks placed here, dispatched or still waiting for Running.
    bound: BTreeSet<String>,
    /// Bound but not yet dispatched, in placement order.
    waiting: Vec<String>,
    terminate_requested: bool,
}

fn task_key(id: &str) -> String {
    format!("tasks/{id}")
}

fn instance_key(id: &str) -> String {
    format!("instances/{id}")
}

pub struct ControlPlane {
    cfg: SchedulerConfig,
    limits: Arc<Limits>,
    bus: EventBus,
    sub: Subscription,
    store: Arc<MetadataStore>,
    queue: TaskQueue,
    factory: Option<Arc<dyn ProgramFactory>>,
    tasks: BTreeMap<String, TaskEntry>,
    instances: BTreeMap<String, InstanceEntry>,
    pool: InstancePool,
    decisions: Vec<DispatchDecision>,
    admissions: Vec<AdmissionRecord>,
    next_task: u64,
    executing: u64,
    unfinished: u64,
    observed_seq: u64,
    stats: ControlStats,
}

impl std::fmt::Debug for ControlPlane {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlPlane")
            .field("queued", &self.queue.len())
            .field("tasks", &self.tasks.len())
            .field("instances", &self.instances.len())
            .finish()
    }
}

impl ControlPlane {
    pub fn new(cfg: SchedulerConfig, limits: Arc<Limits>, bus: EventBus, store: Arc<MetadataStore>) -> Self {
        let sub = bus.subscribe(EventKind::ALL, bus.last_seq() + 1);
        let pool = InstancePool::new(cfg.pool_max);
        Self {
            cfg,
            limits,
            bus,
            sub,
            store,
            queue: TaskQueue::new(),
            factory: None,
            tasks: BTreeMap::new(),
            instances: BTreeMap::new(),
            pool,
            decisions: Vec::new(),
            admissions: Vec::new(),
            next_task: 0,
            executing: 0,
            unfinished: 0,
            observed_seq: 0,
            stats: ControlStats::default(),
        }
    }

    pub fn with_program_factory(mut self, factory: Arc<dyn ProgramFactory>) -> Self {
        self.factory = Some(factory);
        self
    }

    pub fn set_program_factory(&mut self, factory: Arc<dyn ProgramFactory>) {
        self.factory = Some(factory);
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    pub fn limits(&self) -> &Arc<Limits> {
        &self.limits
    }

    pub fn bus(&self) -> &EventBus {
        &self.bus
    }

    pub fn store(&self) -> &Arc<MetadataStore> {
        &self.store
    }

    pub fn stats(&self) -> &ControlStats {
        &self.stats
    }

    pub fn decisions(&self) -> &[DispatchDecision] {
        &self.decisions
    }

    pub fn admissions(&self) -> &[AdmissionRecord] {
        &self.admissions
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn executing(&self) -> u64 {
        self.executing
    }

    /// Tasks not yet in a terminal state.
    pub fn unfinished(&self) -> u64 {
        self.unfinished
    }

    pub fn cursor(&self) -> u64 {
        self.sub.cursor()
    }

    pub fn pool(&self) -> &InstancePool {
        &self.pool
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskRecord> {
        self.tasks.values().map(|e| &e.rec)
    }

    pub fn instances(&self) -> impl Iterator<Item = &InstanceDescriptor> {
        self.instances.values().map(|e| &e.desc)
    }

    pub fn task(&self, id: &str) -> Option<&TaskRecord> {
        self.tasks.get(id).map(|e| &e.rec)
    }

    /// Direct query path alongside the event streams.
    pub fn get_task_detail(&self, id: &str) -> Option<TaskDetail> {
        let e = self.tasks.get(id)?;
        let instance = e.rec.instance_id.as_ref().and_then(|i| self.instances.get(i)).map(|i| i.desc.clone());
        Some(TaskDetail { record: e.rec.clone(), version: e.version, instance })
    }

    /// Skips ids already present in the store, e.g. from a replayed journal.
    pub fn next_task_id(&mut self) -> String {
        loop {
            self.next_task += 1;
            let id = format!("task-{:06}", self.next_task);
            if self.store.version(&task_key(&id)) == 0 {
                return id;
            }
        }
    }

    pub fn submit(&mut self, spec: TaskSpec, submitted_at: Millis) -> Result<String, ControlError> {
        spec.validate()?;
        let id = self.next_task_id();
        self.submit_with_id(id, spec, submitted_at)
    }

    /// Validates, persists and enqueues at the tail.
    pub fn submit_with_id(&mut self, id: String, spec: TaskSpec, submitted_at: Millis) -> Result<String, ControlError> {
        spec.validate()?;
        let mut rec = TaskRecord::new(id.clone(), spec, submitted_at);
        rec.enqueue_seq = self.queue.enqueue(&id)?;
        let version = match self.store.put(&task_key(&id), &rec, Some(0)) {
            Ok(v) => v,
            Err(e) => {
                self.queue.remove(&id);
                return Err(e.into());
            }
        };
        self.tasks.insert(id.clone(), TaskEntry { rec, version, admission: None });
        self.unfinished += 1;
        Ok(id)
    }

    /// Cancels a task that has not been placed yet.
    pub fn cancel(&mut self, id: &str, expected_version: Option<u64>, now: Millis) -> Result<TaskRecord, ControlError> {
        let e = self.tasks.get(id).ok_or_else(|| ControlError::NotFound(id.to_string()))?;
        if let Some(expected) = expected_version {
            if expected != e.version {
                return Err(ControlError::VersionConflict { expected, actual: e.version });
            }
        }
        let rec = transition_task_state(e.rec.clone(), TaskStatus::Cancelled, now)?;
        self.queue.remove(id);
        let e = self.tasks.get_mut(id).expect("checked");
        if let Some(adm) = e.admission.take() {
            let _ = self.limits.finish_task(adm, 0.0);
        }
        e.rec = rec.clone();
        self.unfinished -= 1;
        self.save_task(id);
        Ok(rec)
    }

    fn save_task(&mut self, id: &str) {
        let Some(e) = self.tasks.get_mut(id) else { return };
        match self.store.put(&task_key(id), &e.rec, Some(e.version)) {
            Ok(v) => e.version = v,
            Err(err) => log::error!("persisting {id} failed: {err}"),
        }
    }

    fn save_instance(&mut self, id: &str) {
        let Some(e) = self.instances.get_mut(id) else { return };
        match self.store.put(&instance_key(id), &e.desc, Some(e.version)) {
            Ok(v) => e.version = v,
            Err(err) => log::error!("persisting {id} failed: {err}"),
        }
    }

    fn move_task(&mut self, id: &str, next: TaskStatus, now: Millis) -> bool {
        let Some(e) = self.tasks.get_mut(id) else { return false };
        let prev = e.rec.status;
        match transition_task_state(e.rec.clone(), next, now) {
            Ok(rec) => {
                e.rec = rec;
                if prev == TaskStatus::Executing {
                    self.executing -= 1;
                }
                if next == TaskStatus::Executing {
                    self.executing += 1;
                    self.stats.max_executing = self.stats.max_executing.max(self.executing);
                }
                if next.is_terminal() && !prev.is_terminal() {
                    self.unfinished -= 1;
                }
                if prev.is_terminal() && !next.is_terminal() {
                    self.unfinished += 1;
                }
                self.save_task(id);
                true
            }
            Err(err) => {
                log::warn!("task {id}: {err}");
                false
            }
        }
    }

    /// Consumes pending events and dispatches until nothing changes.
    pub fn pump(&mut self, backend: &mut dyn ComputeBackend) -> Vec<DispatchDecision> {
        let mut out = Vec::new();
        loop {
            let events = match self.sub.poll() {
                Ok(evs) => evs,
                Err(e) => {
                    log::error!("control plane fell behind the event log: {e}");
                    Vec::new()
                }
            };
            let had_events = !events.is_empty();
            for ev in &events {
                self.handle_event(ev, backend, &mut out);
            }
            let before = out.len();
            out.extend(self.run_dispatch_cycle(backend));
            if !had_events && out.len() == before {
                return out;
            }
        }
    }

    /// Admits from the head of the queue until the head cannot be admitted.
    /// Nothing behind a blocked head is considered.
    pub fn run_dispatch_cycle(&mut self, backend: &mut dyn ComputeBackend) -> Vec<DispatchDecision> {
        let mut out = Vec::new();
        while let Some(head) = self.queue.peek() {
            let Some(e) = self.tasks.get(&head.task_id) else {
                self.queue.pop_if_head(head.seq);
                continue;
            };
            if e.rec.status != TaskStatus::Queued {
                self.queue.pop_if_head(head.seq);
                continue;
            }
            let mode = e.rec.mode(self.cfg.mode_default);
            if mode == ExecutionMode::Persistent && self.pool.pick().is_none() {
                break;
            }
            let (owner, slots) = (e.rec.spec.owner.clone(), e.rec.spec.slots);
            let admission = match self.limits.admit_task(&owner, self.cfg.quota_estimate_hours, slots) {
                Ok(a) => a,
                Err(err) => {
                    self.note_blocked(&head.task_id, &err);
                    break;
                }
            };
            self.queue.pop_if_head(head.seq);
            let now = backend.now();
            self.admissions.push(AdmissionRecord { task_id: head.task_id.clone(), enqueue_seq: head.seq, at: now });
            let e = self.tasks.get_mut(&head.task_id).expect("present");
            e.admission = Some(admission);
            e.rec.last_error = None;
            self.move_task(&head.task_id, TaskStatus::Scheduled, now);
            match mode {
                ExecutionMode::Ephemeral => self.place_ephemeral(&head.task_id, backend, now),
                ExecutionMode::Persistent => self.place_persistent(&head.task_id, backend, now, &mut out),
            }
        }
        out
    }

    fn note_blocked(&mut self, id: &str, err: &LimitError) {
        let msg = format!("waiting: {err}");
        let Some(e) = self.tasks.get_mut(id) else { return };
        if e.rec.last_error.as_deref() != Some(msg.as_str()) {
            log::debug!("head {id} blocked: {err}");
            e.rec.last_error = Some(msg);
            self.save_task(id);
        }
    }

    fn provision(&mut self, backend: &mut dyn ComputeBackend, task_id: &str, mode: ExecutionMode, now: Millis) -> Option<String> {
        let image = self.tasks[task_id].rec.spec.task.env_spec.image.clone();
        let req = ProvisionRequest { profile: self.cfg.profile.clone(), image, mode };
        match backend.provision(&req) {
            Ok(iid) => {
                let desc = InstanceDescriptor::new(iid.clone(), self.cfg.profile.clone(), mode, now);
                self.instances.insert(
                    iid.clone(),
                    InstanceEntry { desc, version: self.store.version(&instance_key(&iid)), bound: BTreeSet::new(), waiting: Vec::new(), terminate_requested: false },
                );
                self.save_instance(&iid);
                Some(iid)
            }
            Err(err) => {
                self.stats.provision_failures += 1;
                self.fail_unplaced(task_id, &format!("provision failed: {err}"), now);
                None
            }
        }
    }

    fn bind(&mut self, task_id: &str, iid: &str, now: Millis) {
        let inst = self.instances.get_mut(iid).expect("known instance");
        inst.bound.insert(task_id.to_string());
        inst.waiting.push(task_id.to_string());
        self.tasks.get_mut(task_id).expect("known task").rec.instance_id = Some(iid.to_string());
        self.move_task(task_id, TaskStatus::Provisioning, now);
    }

    fn place_ephemeral(&mut self, task_id: &str, backend: &mut dyn ComputeBackend, now: Millis) {
        if let Some(iid) = self.provision(backend, task_id, ExecutionMode::Ephemeral, now) {
            self.bind(task_id, &iid, now);
        }
    }

    fn place_persistent(&mut self, task_id: &str, backend: &mut dyn ComputeBackend, now: Millis, out: &mut Vec<DispatchDecision>) {
        match self.pool.pick().expect("checked before admission") {
            PoolPick::Running(iid) => {
                self.instances.get_mut(&iid).expect("pooled").bound.insert(task_id.to_string());
                self.tasks.get_mut(task_id).expect("known").rec.instance_id = Some(iid.clone());
                self.refresh_pool(&iid);
                self.dispatch(task_id, &iid, backend, now, out);
            }
            PoolPick::Pending(iid) => {
                self.bind(task_id, &iid, now);
                self.refresh_pool(&iid);
            }
            PoolPick::New => {
                if let Some(iid) = self.provision(backend, task_id, ExecutionMode::Persistent, now) {
                    self.pool.add(&iid);
                    self.bind(task_id, &iid, now);
                    self.refresh_pool(&iid);
                }
            }
        }
    }

    fn refresh_pool(&mut self, iid: &str) {
        let Some(e) = self.instances.get(iid) else { return };
        if e.terminate_requested || e.desc.state.is_final() || e.desc.state == InstanceState::Draining {
            self.pool.withhold(iid);
            return;
        }
        let room = (e.bound.len() as u32) < e.desc.profile.max_concurrent_tasks;
        self.pool.update(iid, e.desc.state == InstanceState::Running, e.bound.len(), room);
    }

    fn build_workload(&self, rec: &TaskRecord) -> Result<Workload, String> {
        match &rec.spec.workload {
            WorkloadSpec::Synthetic => Ok(Workload::Synthetic),
            WorkloadSpec::Fixed { duration_ms } => Ok(Workload::Fixed(*duration_ms)),
            WorkloadSpec::Rollout { .. } => match &self.factory {
                Some(f) => f.build(rec).map(Workload::Program),
                None => Err("no program factory registered for rollout workloads".into()),
            },
        }
    }

    fn dispatch(&mut self, task_id: &str, iid: &str, backend: &mut dyn ComputeBackend, now: Millis, out: &mut Vec<DispatchDecision>) {
        let inst = self.instances.get_mut(iid).expect("known instance");
        debug_assert_eq!(inst.desc.state, InstanceState::Running);
        if let Err(err) = inst.desc.attach(task_id) {
            log::error!("cannot attach {task_id} to {iid}: {err}");
            self.fail_unplaced(task_id, &err.to_string(), now);
            return;
        }
        let mode = inst.desc.mode;
        self.save_instance(iid);
        if !self.move_task(task_id, TaskStatus::Executing, now) {
            return;
        }
        let rec = self.tasks[task_id].rec.clone();
        let workload = self.build_workload(&rec);
        let started = workload.and_then(|workload| {
            let a = Assignment {
                task_id: task_id.to_string(),
                attempt: rec.attempt,
                instance_id: iid.to_string(),
                env_spec: rec.spec.task.env_spec.clone(),
                workload,
            };
            backend.start_task(a).map_err(|e| e.to_string())
        });
        if let Err(err) = started {
            let outcome = TaskOutcome { attempt: rec.attempt, instance_id: iid.to_string(), error: Some(err), ..Default::default() };
            self.finish(task_id, &outcome, false, backend, now);
            return;
        }
        let d = DispatchDecision {
            task_id: task_id.to_string(),
            attempt: rec.attempt,
            enqueue_seq: rec.enqueue_seq,
            instance_id: iid.to_string(),
            mode,
            decided_at: now,
            observed_seq: self.observed_seq,
        };
        log::info!("DISPATCH task={} instance={} mode={} seq={}", d.task_id, d.instance_id, d.mode, d.enqueue_seq);
        self.decisions.push(d.clone());
        out.push(d);
    }

    /// Fails a task that holds an admission but never started executing.
    fn fail_unplaced(&mut self, task_id: &str, reason: &str, now: Millis) {
        let Some(e) = self.tasks.get_mut(task_id) else { return };
        e.rec.last_error = Some(reason.to_string());
        if let Some(adm) = e.admission.take() {
            if let Err(err) = self.limits.finish_task(adm, 0.0) {
                log::error!("{task_id}: {err}");
            }
        }
        if let Some(iid) = e.rec.instance_id.clone() {
            if let Some(inst) = self.instances.get_mut(&iid) {
                inst.bound.remove(task_id);
                inst.waiting.retain(|t| t != task_id);
            }
            self.refresh_pool(&iid);
        }
        let status = self.tasks[task_id].rec.status;
        if status == TaskStatus::Scheduled {
            self.move_task(task_id, TaskStatus::Provisioning, now);
        }
        if self.move_task(task_id, TaskStatus::Failed, now) {
            self.maybe_retry(task_id, now);
        }
    }

    fn maybe_retry(&mut self, task_id: &str, now: Millis) {
        let attempt = self.tasks[task_id].rec.attempt;
        if attempt >= self.cfg.retry_max {
            log::warn!("task {task_id} failed permanently after {} attempts", attempt + 1);
            return;
        }
        if !self.move_task(task_id, TaskStatus::Queued, now) {
            return;
        }
        match self.queue.enqueue(task_id) {
            Ok(seq) => {
                self.tasks.get_mut(task_id).expect("known").rec.enqueue_seq = seq;
                self.stats.retries += 1;
                self.save_task(task_id);
            }
            Err(err) => log::error!("re-enqueue of {task_id} failed: {err}"),
        }
    }

    pub fn handle_event(&mut self, ev: &Event, backend: &mut dyn ComputeBackend, out: &mut Vec<DispatchDecision>) {
        self.stats.events_handled += 1;
        self.observed_seq = self.observed_seq.max(ev.seq);
        let now = backend.now();
        match (&ev.kind, &ev.payload) {
            (EventKind::InstanceStateChanged, EventPayload::InstanceState { to, .. }) => {
                self.on_instance_state(&ev.subject_id, *to, backend, now, out)
            }
            (EventKind::TaskCompleted, EventPayload::Task(o)) => self.on_task_outcome(&ev.subject_id, o, true, backend, now),
            (EventKind::TaskFailed, EventPayload::Task(o)) => self.on_task_outcome(&ev.subject_id, o, false, backend, now),
            _ => log::warn!("malformed event {}", ev.seq),
        }
    }

    fn on_instance_state(&mut self, iid: &str, to: InstanceState, backend: &mut dyn ComputeBackend, now: Millis, out: &mut Vec<DispatchDecision>) {
        let Some(inst) = self.instances.get_mut(iid) else {
            log::warn!("event for unknown instance {iid}");
            self.stats.duplicates_ignored += 1;
            return;
        };
        if inst.desc.state == to {
            self.stats.duplicates_ignored += 1;
            return;
        }
        if let Err(err) = inst.desc.transition(to, now) {
            log::warn!("{iid}: {err}");
            self.stats.duplicates_ignored += 1;
            return;
        }
        self.save_instance(iid);
        match to {
            InstanceState::Running => {
                let inst = self.instances.get_mut(iid).expect("known");
                let waiting = std::mem::take(&mut inst.waiting);
                if inst.terminate_requested {
                    inst.waiting = waiting;
                } else {
                    for tid in waiting {
                        self.dispatch(&tid, iid, backend, now, out);
                    }
                }
                self.refresh_pool(iid);
            }
            InstanceState::Failed | InstanceState::Terminated => {
                let inst = self.instances.get_mut(iid).expect("known");
                let waiting = std::mem::take(&mut inst.waiting);
                let bound: Vec<String> = std::mem::take(&mut inst.bound).into_iter().collect();
                self.pool.remove(iid);
                for tid in bound {
                    let status = self.tasks.get(&tid).map(|e| e.rec.status);
                    let reason = format!("instance {iid} {to:?}");
                    if waiting.contains(&tid) {
                        self.fail_unplaced(&tid, &reason, now);
                    } else if status == Some(TaskStatus::Executing) {
                        let attempt = self.tasks[&tid].rec.attempt;
                        let o = TaskOutcome { attempt, instance_id: iid.to_string(), error: Some(reason), ..Default::default() };
                        self.finish(&tid, &o, false, backend, now);
                    }
                }
            }
            _ => {}
        }
    }

    fn on_task_outcome(&mut self, tid: &str, o: &TaskOutcome, ok: bool, backend: &mut dyn ComputeBackend, now: Millis) {
        let fresh = self
            .tasks
            .get(tid)
            .is_some_and(|e| e.rec.status == TaskStatus::Executing && e.rec.attempt == o.attempt && e.admission.is_some());
        if !fresh {
            log::debug!("ignoring stale or duplicate outcome for {tid} attempt {}", o.attempt);
            self.stats.duplicates_ignored += 1;
            return;
        }
        self.finish(tid, o, ok, backend, now);
    }

    /// Records the outcome, releases the admission exactly once and frees
    /// the instance slot.
    fn finish(&mut self, tid: &str, o: &TaskOutcome, ok: bool, backend: &mut dyn ComputeBackend, now: Millis) {
        let e = self.tasks.get_mut(tid).expect("known task");
        let ts = &mut e.rec.phase_timestamps;
        let floor = ts.scheduled.unwrap_or(0);
        ts.env_ready = o.env_ready.map(|t| t.max(floor));
        ts.exec_start = o.exec_start.map(|t| t.max(ts.env_ready.unwrap_or(floor)));
        ts.exec_end = o.exec_end.map(|t| t.max(ts.exec_start.unwrap_or(floor)));
        let actual = match (ts.env_ready, ts.exec_end) {
            (Some(a), Some(b)) => ms_to_hours(b.saturating_sub(a)),
            _ => 0.0,
        };
        e.rec.result_ref = o.result_ref.clone();
        e.rec.last_error = o.error.clone();
        if let Some(adm) = e.admission.take() {
            if let Err(err) = self.limits.finish_task(adm, actual) {
                log::error!("{tid}: {err}");
            }
        }
        let iid = e.rec.instance_id.clone();
        self.move_task(tid, if ok { TaskStatus::Completed } else { TaskStatus::Failed }, now);
        if let Some(iid) = iid {
            if let Some(inst) = self.instances.get_mut(&iid) {
                inst.desc.detach(tid);
                inst.bound.remove(tid);
                let ephemeral = inst.desc.mode == ExecutionMode::Ephemeral;
                let live = !inst.desc.state.is_final();
                self.save_instance(&iid);
                if ephemeral && live {
                    self.request_terminate(&iid, backend);
                } else {
                    self.refresh_pool(&iid);
                }
            }
        }
        if !ok {
            self.maybe_retry(tid, now);
        }
    }

    fn request_terminate(&mut self, iid: &str, backend: &mut dyn ComputeBackend) {
        let Some(inst) = self.instances.get_mut(iid) else { return };
        if inst.terminate_requested {
            return;
        }
        inst.terminate_requested = true;
        self.pool.withhold(iid);
        if let Err(err) = backend.terminate(iid) {
            log::warn!("terminate {iid}: {err}");
        }
    }

    /// Grows the persistent pool by up to `n` idle instances ahead of demand.
    pub fn prewarm(&mut self, n: u32, backend: &mut dyn ComputeBackend) -> Vec<String> {
        let mut out = Vec::new();
        for _ in 0..n {
            if self.pool.len() as u32 >= self.cfg.pool_max {
                break;
            }
            let req = ProvisionRequest { profile: self.cfg.profile.clone(), image: String::new(), mode: ExecutionMode::Persistent };
            match backend.provision(&req) {
                Ok(iid) => {
                    let desc = InstanceDescriptor::new(iid.clone(), self.cfg.profile.clone(), ExecutionMode::Persistent, backend.now());
                    self.instances.insert(
                        iid.clone(),
                        InstanceEntry { desc, version: self.store.version(&instance_key(&iid)), bound: BTreeSet::new(), waiting: Vec::new(), terminate_requested: false },
                    );
                    self.save_instance(&iid);
                    self.pool.add(&iid);
                    self.refresh_pool(&iid);
                    out.push(iid);
                }
                Err(err) => {
                    self.stats.provision_failures += 1;
                    log::warn!("prewarm provision failed: {err}");
                }
            }
        }
        out
    }

    /// Terminates pooled instances with nothing bound. Returns how many.
    pub fn drain_pool(&mut self, backend: &mut dyn ComputeBackend) -> usize {
        let idle: Vec<String> = self.pool.idle().cloned().collect();
        let n = idle.len();
        for iid in idle {
            self.request_terminate(&iid, backend);
        }
        n
    }
}
