// SPDX-License-Identifier: Apache-2.0

//! Loops that connect a control plane to a backend.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::bus::EventBus;
use crate::env::{ComputeBackend, LocalBackend, LocalConfig, SimBackend, SimConfig};
use crate::limits::Limits;
use crate::model::TaskSpec;
use crate::persistence::MetadataStore;
use crate::scheduler::{ControlError, ControlPlane, SchedulerConfig};
use crate::time::{minutes_to_ms, Millis};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuntimeError {
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("no further progress possible: {unfinished} tasks unfinished, {queued} queued")]
    Stalled { unfinished: u64, queued: usize },
    #[error("timed out with {unfinished} tasks unfinished")]
    Timeout { unfinished: u64 },
}

const TICK_INSTANTS: usize = 4096;

/// What the gateway and the experiment harness need from any runtime.
pub trait Driver: Send {
    fn control(&self) -> &ControlPlane;
    fn control_mut(&mut self) -> &mut ControlPlane;
    fn now(&self) -> Millis;
    fn submit(&mut self, spec: TaskSpec) -> Result<String, ControlError>;
    /// Makes whatever progress is available without blocking.
    fn tick(&mut self);
    fn run_until_idle(&mut self) -> Result<(), RuntimeError>;
    /// True for an accepted submission the control plane has not seen yet.
    fn is_pending(&self, _task_id: &str) -> bool {
        false
    }
    fn cancel(&mut self, task_id: &str, expected_version: Option<u64>) -> Result<crate::model::TaskRecord, ControlError> {
        let now = self.now();
        self.control_mut().cancel(task_id, expected_version, now)
    }
}

/// Virtual-time runtime over [`SimBackend`]. Submissions reach the control
/// plane after the configured ingest delay.
pub struct SimRuntime {
    cp: ControlPlane,
    backend: SimBackend,
    ingest: Millis,
    arrivals: BTreeMap<u64, (String, TaskSpec, Millis)>,
    next_token: u64,
}

impl std::fmt::Debug for SimRuntime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimRuntime").field("now", &self.backend.now()).field("cp", &self.cp).finish()
    }
}

impl SimRuntime {
    pub fn new(cp: ControlPlane, backend: SimBackend) -> Self {
        let ingest = minutes_to_ms(backend.config().ingest_min);
        Self { cp, backend, ingest, arrivals: BTreeMap::new(), next_token: 0 }
    }

    pub fn build(sim: SimConfig, sched: SchedulerConfig, limits: Arc<Limits>, store: Arc<MetadataStore>) -> Self {
        let bus = EventBus::new();
        let backend = SimBackend::new(sim, bus.clone());
        Self::new(ControlPlane::new(sched, limits, bus, store), backend)
    }

    pub fn control(&self) -> &ControlPlane {
        &self.cp
    }

    pub fn control_mut(&mut self) -> &mut ControlPlane {
        &mut self.cp
    }

    pub fn backend(&self) -> &SimBackend {
        &self.backend
    }

    pub fn backend_mut(&mut self) -> &mut SimBackend {
        &mut self.backend
    }

    pub fn parts(&mut self) -> (&mut ControlPlane, &mut SimBackend) {
        (&mut self.cp, &mut self.backend)
    }

    pub fn now(&self) -> Millis {
        self.backend.now()
    }

    /// Sends a submission at virtual time `at`; it is admitted after ingest.
    pub fn submit_at(&mut self, spec: TaskSpec, at: Millis) -> Result<String, ControlError> {
        spec.validate()?;
        let id = self.cp.next_task_id();
        self.next_token += 1;
        self.backend.schedule_external(at.max(self.backend.now()) + self.ingest, self.next_token);
        self.arrivals.insert(self.next_token, (id.clone(), spec, at));
        Ok(id)
    }

    pub fn prewarm(&mut self, n: u32) -> Vec<String> {
        self.cp.prewarm(n, &mut self.backend)
    }

    fn deliver(&mut self, tokens: Vec<u64>) {
        for t in tokens {
            if let Some((id, spec, at)) = self.arrivals.remove(&t) {
                if let Err(e) = self.cp.submit_with_id(id.clone(), spec, at) {
                    log::error!("submission {id} rejected at ingest: {e}");
                }
            }
        }
    }

    /// Advances one instant. Returns false once nothing is scheduled.
    pub fn step(&mut self) -> bool {
        self.cp.pump(&mut self.backend);
        match self.backend.step() {
            Some(tokens) => {
                self.deliver(tokens);
                self.cp.pump(&mut self.backend);
                true
            }
            None => false,
        }
    }

    /// Runs every event scheduled at or before `t`.
    pub fn run_until(&mut self, t: Millis) {
        while self.backend.next_event_time().is_some_and(|n| n <= t) {
            self.step();
        }
    }

    /// Runs until no events remain. Unfinished tasks at that point can never
    /// finish, which is reported as a stall rather than a hang.
    pub fn run_until_idle(&mut self) -> Result<(), RuntimeError> {
        while self.step() {}
        if self.cp.unfinished() > 0 {
            return Err(RuntimeError::Stalled { unfinished: self.cp.unfinished(), queued: self.cp.queue_len() });
        }
        Ok(())
    }

    /// Terminates idle pooled instances and lets the terminations settle.
    pub fn drain(&mut self) -> Result<(), RuntimeError> {
        self.cp.drain_pool(&mut self.backend);
        self.run_until_idle()
    }
}

impl Driver for SimRuntime {
    fn control(&self) -> &ControlPlane {
        &self.cp
    }

    fn control_mut(&mut self) -> &mut ControlPlane {
        &mut self.cp
    }

    fn now(&self) -> Millis {
        self.backend.now()
    }

    fn submit(&mut self, spec: TaskSpec) -> Result<String, ControlError> {
        let now = self.backend.now();
        self.submit_at(spec, now)
    }

    /// Virtual time has no reason to wait; a tick runs a bounded number of
    /// instants so callers sharing the runtime are not starved.
    fn tick(&mut self) {
        for _ in 0..TICK_INSTANTS {
            if !self.step() {
                break;
            }
        }
    }

    fn run_until_idle(&mut self) -> Result<(), RuntimeError> {
        SimRuntime::run_until_idle(self)
    }

    fn is_pending(&self, task_id: &str) -> bool {
        self.arrivals.values().any(|(id, _, _)| id == task_id)
    }
}

/// Wall-clock runtime over [`LocalBackend`].
pub struct LocalRuntime {
    cp: ControlPlane,
    backend: LocalBackend,
    bus: EventBus,
    pub timeout: Duration,
}

impl LocalRuntime {
    pub fn build(local: LocalConfig, sched: SchedulerConfig, limits: Arc<Limits>, store: Arc<MetadataStore>) -> Self {
        let bus = EventBus::new();
        let backend = LocalBackend::new(local, bus.clone());
        let cp = ControlPlane::new(sched, limits, bus.clone(), store);
        Self { cp, backend, bus, timeout: Duration::from_secs(120) }
    }

    pub fn with_program_factory(mut self, f: Arc<dyn crate::scheduler::ProgramFactory>) -> Self {
        self.cp = self.cp.with_program_factory(f);
        self
    }

    pub fn backend(&self) -> &LocalBackend {
        &self.backend
    }

    fn wait(&mut self, max: Duration) {
        self.bus.wait_beyond(self.cp.cursor() + 1, max);
        self.cp.pump(&mut self.backend);
    }
}

impl Driver for LocalRuntime {
    fn control(&self) -> &ControlPlane {
        &self.cp
    }

    fn control_mut(&mut self) -> &mut ControlPlane {
        &mut self.cp
    }

    fn now(&self) -> Millis {
        self.backend.now()
    }

    fn submit(&mut self, spec: TaskSpec) -> Result<String, ControlError> {
        let now = self.backend.now();
        let id = self.cp.submit(spec, now)?;
        self.cp.pump(&mut self.backend);
        Ok(id)
    }

    fn tick(&mut self) {
        self.cp.pump(&mut self.backend);
    }

    fn run_until_idle(&mut self) -> Result<(), RuntimeError> {
        let deadline = Instant::now() + self.timeout;
        self.cp.pump(&mut self.backend);
        while self.cp.unfinished() > 0 {
            let now = Instant::now();
            if now >= deadline {
                return Err(RuntimeError::Timeout { unfinished: self.cp.unfinished() });
            }
            self.wait((deadline - now).min(Duration::from_millis(200)));
        }
        self.cp.drain_pool(&mut self.backend);
        self.cp.pump(&mut self.backend);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Strategy;
    use crate::model::{AgentTask, ExecutionMode, TaskStatus};
    use crate::time::ms_to_minutes;

    fn sim_rt(strategy: Strategy, sched: SchedulerConfig, capacity: u32) -> SimRuntime {
        let sim = SimConfig::for_strategy(strategy).with_seed(3);
        SimRuntime::build(sim, sched, Arc::new(Limits::new(capacity)), Arc::new(MetadataStore::new()))
    }

    #[test]
    fn ingest_delay_precedes_scheduling() {
        let mut rt = sim_rt(Strategy::Distributed, SchedulerConfig::default(), 10);
        let id = rt.submit_at(TaskSpec::new(AgentTask::new("k", "img")).mode(ExecutionMode::Ephemeral), 0).unwrap();
        rt.run_until_idle().unwrap();
        let ts = &rt.control().task(&id).unwrap().phase_timestamps;
        assert_eq!(ts.submitted, Some(0));
        assert_eq!(ts.scheduled, Some(minutes_to_ms(1.0)));
        assert_eq!(rt.control().task(&id).unwrap().status, TaskStatus::Completed);
    }

    #[test]
    fn stall_is_reported() {
        let mut rt = sim_rt(Strategy::Distributed, SchedulerConfig::default(), 10);
        rt.control().limits().quota.set_quota("bob", crate::limits::OwnerQuota { instance_hours: Some(0.0), max_in_flight: None });
        rt.submit_at(TaskSpec::new(AgentTask::new("k", "img")).owner("bob"), 0).unwrap();
        assert!(matches!(rt.run_until_idle(), Err(RuntimeError::Stalled { unfinished: 1, queued: 1 })));
    }

    #[test]
    fn warm_pool_skips_boot() {
        let sched = SchedulerConfig { pool_max: 2, ..Default::default() };
        let mut rt = sim_rt(Strategy::Distributed, sched, 10);
        assert_eq!(rt.prewarm(5).len(), 2);
        rt.run_until_idle().unwrap();
        let t0 = rt.now();
        let id = rt.submit_at(TaskSpec::new(AgentTask::new("k", "img")).mode(ExecutionMode::Persistent), t0).unwrap();
        rt.run_until_idle().unwrap();
        let ts = rt.control().task(&id).unwrap().phase_timestamps.clone();
        let startup = ms_to_minutes(ts.env_ready.unwrap() - ts.scheduled.unwrap());
        assert!((startup - 0.5).abs() < 1e-9, "{startup}");
        rt.drain().unwrap();
        assert_eq!(rt.backend().live_instances(), 0);
    }
}
