// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::startup::StartupModel;
use super::{
    Assignment, ComputeBackend, EnvError, EnvHandle, EnvironmentOps, ProgramContext, ProgramOutcome, Progress,
    ProvisionRequest, SimConfig, StepResult, Workload,
};
use crate::bus::EventBus;
use crate::model::{Action, ActionKind, EnvSpec, EventDraft, ExecutionMode, InstanceState, State, TaskOutcome};
use crate::sim::{derive_seed, Engine, EventClass};
use crate::time::{minutes_to_ms, Clock, Millis, VirtualClock};

/// Deterministic fault injection on top of the probabilistic knobs in
/// [`SimConfig`].
#[derive(Debug, Clone, Default)]
pub struct FaultPlan {
    /// Provision requests, by 1-based request order, that end in Failed.
    pub fail_provision: BTreeSet<u64>,
    /// `(task_id, attempt)` pairs whose execution reports failure.
    pub fail_task: BTreeSet<(String, u32)>,
    /// Extra copies of every completion/failure event, published at the
    /// same instant (duplicate delivery).
    pub duplicate_outcomes: u32,
}

type TaskKey = (String, u32);

#[derive(Debug, Clone, PartialEq, Eq)]
enum StartupTarget {
    Instance(String),
    Task(TaskKey),
}

#[derive(Debug)]
enum Ev {
    BootDone(String),
    ResolveStartups,
    StartupDone(StartupTarget),
    ExecStart(TaskKey),
    Wake(TaskKey),
    ExecEnd(TaskKey),
    Collected(TaskKey),
    FailInstance(String),
    External(u64),
}

#[derive(Debug)]
struct Inst {
    mode: ExecutionMode,
    state: InstanceState,
    active: BTreeSet<String>,
    terminate_requested: bool,
    request_no: u64,
}

struct Running {
    instance_id: String,
    workload: Option<Workload>,
    env_ready: Option<Millis>,
    exec_start: Option<Millis>,
    exec_end: Option<Millis>,
    outcome: ProgramOutcome,
    handles: Vec<u64>,
}

#[derive(Debug)]
struct SimEnv {
    instance_id: String,
    state: State,
    closed: bool,
    steps: u32,
    fault_at_step: Option<u32>,
    seed: u64,
}

/// One startup observed by the backend: concurrency and resulting duration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StartupSample {
    pub at: Millis,
    pub concurrent: u32,
    pub minutes: f64,
}

/// Simulated cloud over virtual time. Every effect is an engine event, so
/// a run is a pure function of the configuration, seed and call sequence.
pub struct SimBackend {
    cfg: SimConfig,
    startup_model: Box<dyn StartupModel>,
    bus: EventBus,
    clock: VirtualClock,
    engine: Engine<Ev>,
    instances: BTreeMap<String, Inst>,
    live: u32,
    requests: u64,
    tasks: BTreeMap<TaskKey, Running>,
    envs: BTreeMap<u64, SimEnv>,
    next_env: u64,
    current_program: Option<TaskKey>,
    pending_startups: Vec<(StartupTarget, ExecutionMode)>,
    startups_in_flight: u32,
    startup_log: Vec<StartupSample>,
    faults: FaultPlan,
}

impl std::fmt::Debug for SimBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimBackend")
            .field("strategy", &self.cfg.strategy)
            .field("now", &self.engine.now())
            .field("live", &self.live)
            .finish()
    }
}

impl SimBackend {
    pub fn new(cfg: SimConfig, bus: EventBus) -> Self {
        let startup = Box::new(cfg.startup.clone());
        Self::with_startup_model(cfg, bus, startup)
    }

    pub fn with_startup_model(cfg: SimConfig, bus: EventBus, startup_model: Box<dyn StartupModel>) -> Self {
        Self {
            cfg,
            startup_model,
            bus,
            clock: VirtualClock::new(),
            engine: Engine::new(),
            instances: BTreeMap::new(),
            live: 0,
            requests: 0,
            tasks: BTreeMap::new(),
            envs: BTreeMap::new(),
            next_env: 0,
            current_program: None,
            pending_startups: Vec::new(),
            startups_in_flight: 0,
            startup_log: Vec::new(),
            faults: FaultPlan::default(),
        }
    }

    pub fn with_faults(mut self, faults: FaultPlan) -> Self {
        self.faults = faults;
        self
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn clock(&self) -> VirtualClock {
        self.clock.clone()
    }

    pub fn bus(&self) -> &EventBus {
        &self.bus
    }

    pub fn startup_log(&self) -> &[StartupSample] {
        &self.startup_log
    }

    pub fn events_fired(&self) -> u64 {
        self.engine.fired()
    }

    pub fn live_instances(&self) -> u32 {
        self.live
    }

    pub fn is_idle(&self) -> bool {
        self.engine.is_empty()
    }

    pub fn next_event_time(&self) -> Option<Millis> {
        self.engine.peek_time()
    }

    /// Wakes the caller at `at` with `token` (see [`SimBackend::step`]).
    pub fn schedule_external(&mut self, at: Millis, token: u64) {
        self.engine.schedule(at.max(self.engine.now()), EventClass::Normal, Ev::External(token));
    }

    /// Fails a running instance at `at`, along with any task on it.
    pub fn schedule_instance_failure(&mut self, at: Millis, instance_id: &str) {
        self.engine.schedule(at.max(self.engine.now()), EventClass::Normal, Ev::FailInstance(instance_id.to_string()));
    }

    /// Fires every event at the next (instant, class) and returns the
    /// external tokens among them; `None` once nothing is scheduled.
    pub fn step(&mut self) -> Option<Vec<u64>> {
        let (at, _, batch) = self.engine.pop_batch()?;
        self.clock.advance_to(at);
        let mut externals = Vec::new();
        for ev in batch {
            match ev {
                Ev::External(t) => externals.push(t),
                other => self.fire(other),
            }
        }
        Some(externals)
    }

    fn ms(min: f64) -> Millis {
        minutes_to_ms(min)
    }

    fn now_ms(&self) -> Millis {
        self.engine.now()
    }

    fn publish_instance(&self, id: &str, from: InstanceState, to: InstanceState, mode: ExecutionMode) {
        self.bus.publish(EventDraft::instance(id, from, to, mode, self.now_ms()));
    }

    fn set_state(&mut self, id: &str, to: InstanceState) {
        let now_final = to.is_final();
        let Some(inst) = self.instances.get_mut(id) else { return };
        let (from, mode) = (inst.state, inst.mode);
        debug_assert!(from.can_transition(to), "{from:?} -> {to:?}");
        inst.state = to;
        if now_final {
            self.live -= 1;
        }
        self.publish_instance(id, from, to, mode);
    }

    fn queue_startup(&mut self, target: StartupTarget, mode: ExecutionMode) {
        if self.pending_startups.is_empty() {
            self.engine.schedule(self.now_ms(), EventClass::EndOfInstant, Ev::ResolveStartups);
        }
        self.pending_startups.push((target, mode));
    }

    fn fire(&mut self, ev: Ev) {
        match ev {
            Ev::BootDone(id) => self.boot_done(&id),
            Ev::ResolveStartups => self.resolve_startups(),
            Ev::StartupDone(target) => {
                self.startups_in_flight -= 1;
                match target {
                    StartupTarget::Instance(id) => self.instance_ready(&id),
                    StartupTarget::Task(key) => {
                        if let Some(t) = self.tasks.get_mut(&key) {
                            t.env_ready = Some(self.engine.now());
                            let at = self.engine.now() + Self::ms(self.cfg.dispatch_min);
                            self.engine.schedule(at, EventClass::Normal, Ev::ExecStart(key));
                        }
                    }
                }
            }
            Ev::ExecStart(key) => self.exec_start(key),
            Ev::Wake(key) => self.wake(key),
            Ev::ExecEnd(key) => self.exec_end(key),
            Ev::Collected(key) => self.collected(key),
            Ev::FailInstance(id) => self.fail_instance(&id),
            Ev::External(_) => unreachable!("handled by step"),
        }
    }

    fn boot_done(&mut self, id: &str) {
        let Some(inst) = self.instances.get(id) else { return };
        if inst.state != InstanceState::Provisioning {
            return;
        }
        let (mode, request_no) = (inst.mode, inst.request_no);
        let faulted = self.faults.fail_provision.contains(&request_no) || {
            let p = self.cfg.provision_fault_prob;
            p > 0.0 && ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &["provision", id])).random_bool(p)
        };
        if faulted {
            self.set_state(id, InstanceState::Failed);
            return;
        }
        match mode {
            // A fresh instance pulls and starts its environment before it reports ready.
            ExecutionMode::Ephemeral => self.queue_startup(StartupTarget::Instance(id.to_string()), mode),
            ExecutionMode::Persistent => self.instance_ready(id),
        }
    }

    fn instance_ready(&mut self, id: &str) {
        let Some(inst) = self.instances.get(id) else { return };
        if inst.state != InstanceState::Provisioning {
            return;
        }
        let terminate = inst.terminate_requested;
        self.set_state(id, InstanceState::Running);
        if terminate {
            self.set_state(id, InstanceState::Draining);
            self.set_state(id, InstanceState::Terminated);
        }
    }

    fn resolve_startups(&mut self) {
        let batch = std::mem::take(&mut self.pending_startups);
        let c = self.startups_in_flight + batch.len() as u32;
        let now = self.engine.now();
        for (target, mode) in batch {
            let minutes = self.startup_model.startup_minutes(self.cfg.strategy, mode, c);
            self.startup_log.push(StartupSample { at: now, concurrent: c, minutes });
            self.startups_in_flight += 1;
            self.engine.schedule(now + Self::ms(minutes), EventClass::Normal, Ev::StartupDone(target));
        }
    }

    fn exec_start(&mut self, key: TaskKey) {
        let now = self.engine.now();
        let Some(t) = self.tasks.get_mut(&key) else { return };
        t.exec_start = Some(now);
        let colocated = self.instances.get(&t.instance_id).map_or(1, |i| i.active.len() as u32).max(1);
        match t.workload.as_ref() {
            Some(Workload::Synthetic) | None => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &["exec", &key.0, &key.1.to_string()]));
                let minutes = self.cfg.exec.sample_minutes(&mut rng, colocated);
                self.engine.schedule(now + Self::ms(minutes), EventClass::Normal, Ev::ExecEnd(key));
            }
            Some(Workload::Fixed(ms)) => {
                let ms = *ms;
                self.engine.schedule(now + ms, EventClass::Normal, Ev::ExecEnd(key));
            }
            Some(Workload::Program(_)) => self.wake(key),
        }
    }

    fn wake(&mut self, key: TaskKey) {
        let now = self.engine.now();
        let Some(t) = self.tasks.get_mut(&key) else { return };
        let Some(Workload::Program(mut program)) = t.workload.take() else { return };
        let instance_id = t.instance_id.clone();
        self.current_program = Some(key.clone());
        let progress = {
            let mut ctx = ProgramContext { now, task_id: &key.0, attempt: key.1, instance_id: &instance_id, env: self };
            program.advance(&mut ctx)
        };
        self.current_program = None;
        let Some(t) = self.tasks.get_mut(&key) else { return };
        t.workload = Some(Workload::Program(program));
        match progress {
            Progress::Continue(after) => self.engine.schedule(now + after, EventClass::Normal, Ev::Wake(key)),
            Progress::Done(outcome) => {
                t.outcome = outcome;
                self.exec_end(key);
            }
        }
    }

    fn exec_end(&mut self, key: TaskKey) {
        let now = self.engine.now();
        let Some(t) = self.tasks.get_mut(&key) else { return };
        if t.exec_end.is_some() {
            return;
        }
        t.exec_end = Some(now);
        for h in std::mem::take(&mut t.handles) {
            if let Some(env) = self.envs.get_mut(&h) {
                env.closed = true;
            }
        }
        self.engine.schedule(now + Self::ms(self.cfg.collect_min), EventClass::Normal, Ev::Collected(key));
    }

    fn collected(&mut self, key: TaskKey) {
        let now = self.engine.now();
        let Some(t) = self.tasks.remove(&key) else { return };
        if let Some(inst) = self.instances.get_mut(&t.instance_id) {
            inst.active.remove(&key.0);
        }
        let injected = self.faults.fail_task.contains(&key);
        let error = t.outcome.failure.clone().or_else(|| injected.then(|| "injected task fault".to_string()));
        let outcome = TaskOutcome {
            attempt: key.1,
            instance_id: t.instance_id.clone(),
            result_ref: t.outcome.result_ref.clone(),
            exit_status: Some(if error.is_some() { 1 } else { 0 }),
            error: error.clone(),
            env_ready: t.env_ready,
            exec_start: t.exec_start,
            exec_end: t.exec_end,
        };
        for _ in 0..=self.faults.duplicate_outcomes {
            let draft = match error {
                Some(_) => EventDraft::task_failed(&key.0, outcome.clone(), now),
                None => EventDraft::task_completed(&key.0, outcome.clone(), now),
            };
            self.bus.publish(draft);
        }
    }

    fn fail_tasks_on(&mut self, instance_id: &str, reason: &str) {
        let now = self.engine.now();
        let keys: Vec<TaskKey> = self.tasks.iter().filter(|(_, t)| t.instance_id == instance_id).map(|(k, _)| k.clone()).collect();
        for key in keys {
            let t = self.tasks.remove(&key).expect("listed");
            let outcome = TaskOutcome {
                attempt: key.1,
                instance_id: instance_id.to_string(),
                error: Some(reason.to_string()),
                env_ready: t.env_ready,
                exec_start: t.exec_start,
                exec_end: t.exec_end.or(t.exec_start.map(|_| now)),
                ..Default::default()
            };
            self.bus.publish(EventDraft::task_failed(&key.0, outcome, now));
        }
        if let Some(inst) = self.instances.get_mut(instance_id) {
            inst.active.clear();
        }
    }

    fn fail_instance(&mut self, id: &str) {
        let Some(inst) = self.instances.get(id) else { return };
        if inst.state.is_final() {
            return;
        }
        self.fail_tasks_on(id, "instance failed");
        self.set_state(id, InstanceState::Failed);
    }
}

impl ComputeBackend for SimBackend {
    fn now(&self) -> Millis {
        self.clock.now()
    }

    fn provision(&mut self, req: &ProvisionRequest) -> Result<String, EnvError> {
        if self.live >= self.cfg.fleet_cap {
            return Err(EnvError::FleetCapExceeded { cap: self.cfg.fleet_cap });
        }
        self.requests += 1;
        let id = format!("i-{:06}", self.requests);
        self.instances.insert(
            id.clone(),
            Inst {
                mode: req.mode,
                state: InstanceState::Requested,
                active: BTreeSet::new(),
                terminate_requested: false,
                request_no: self.requests,
            },
        );
        self.live += 1;
        self.set_state(&id, InstanceState::Provisioning);
        let at = self.engine.now() + Self::ms(self.cfg.boot_min);
        self.engine.schedule(at, EventClass::Normal, Ev::BootDone(id.clone()));
        Ok(id)
    }

    fn terminate(&mut self, instance_id: &str) -> Result<(), EnvError> {
        let inst = self.instances.get_mut(instance_id).ok_or_else(|| EnvError::UnknownInstance(instance_id.to_string()))?;
        if inst.state.is_final() || inst.terminate_requested {
            return Ok(());
        }
        inst.terminate_requested = true;
        match inst.state {
            InstanceState::Running => {
                self.fail_tasks_on(instance_id, "instance terminated");
                self.set_state(instance_id, InstanceState::Draining);
                self.set_state(instance_id, InstanceState::Terminated);
            }
            InstanceState::Draining => self.set_state(instance_id, InstanceState::Terminated),
            // Finishes booting first; `instance_ready` completes the teardown.
            _ => {}
        }
        Ok(())
    }

    fn start_task(&mut self, a: Assignment) -> Result<(), EnvError> {
        let now = self.engine.now();
        let inst = self.instances.get_mut(&a.instance_id).ok_or_else(|| EnvError::UnknownInstance(a.instance_id.clone()))?;
        if inst.state != InstanceState::Running || inst.terminate_requested {
            return Err(EnvError::InstanceNotRunning(a.instance_id));
        }
        inst.active.insert(a.task_id.clone());
        let mode = inst.mode;
        let key = (a.task_id, a.attempt);
        self.tasks.insert(
            key.clone(),
            Running {
                instance_id: a.instance_id,
                workload: Some(a.workload),
                env_ready: None,
                exec_start: None,
                exec_end: None,
                outcome: ProgramOutcome::default(),
                handles: Vec::new(),
            },
        );
        match mode {
            ExecutionMode::Ephemeral => {
                // The environment came up with the instance.
                self.tasks.get_mut(&key).expect("inserted").env_ready = Some(now);
                let at = now + Self::ms(self.cfg.dispatch_min);
                self.engine.schedule(at, EventClass::Normal, Ev::ExecStart(key));
            }
            ExecutionMode::Persistent => self.queue_startup(StartupTarget::Task(key), mode),
        }
        Ok(())
    }
}

impl EnvironmentOps for SimBackend {
    fn open_env(&mut self, instance_id: &str, spec: &EnvSpec) -> Result<(EnvHandle, State), EnvError> {
        let inst = self.instances.get(instance_id).ok_or_else(|| EnvError::UnknownInstance(instance_id.to_string()))?;
        if inst.state != InstanceState::Running {
            return Err(EnvError::InstanceNotRunning(instance_id.to_string()));
        }
        self.next_env += 1;
        let handle = self.next_env;
        let seed_material = format!("{}|{}|{}", spec.image, spec.init, handle);
        let state = State::initial(seed_material.as_bytes());
        let fault_at_step = spec.init.get("fault_at_step").and_then(|v| v.as_u64()).map(|v| v as u32);
        self.envs.insert(
            handle,
            SimEnv {
                instance_id: instance_id.to_string(),
                state: state.clone(),
                closed: false,
                steps: 0,
                fault_at_step,
                seed: derive_seed(self.cfg.seed, &["env", &seed_material]),
            },
        );
        if let Some(key) = &self.current_program {
            if let Some(t) = self.tasks.get_mut(key) {
                t.handles.push(handle);
            }
        }
        Ok((EnvHandle(handle), state))
    }

    fn env_step(&mut self, handle: EnvHandle, action: &Action) -> Result<StepResult, EnvError> {
        let step_fault_prob = self.cfg.step_fault_prob;
        let env = self.envs.get_mut(&handle.0).ok_or(EnvError::UnknownHandle(handle.0))?;
        if env.closed {
            return Err(EnvError::HandleClosed(handle.0));
        }
        let running = self.instances.get(&env.instance_id).is_some_and(|i| i.state == InstanceState::Running);
        if !running {
            return Err(EnvError::InstanceNotRunning(env.instance_id.clone()));
        }
        env.steps += 1;
        let random_fault = step_fault_prob > 0.0
            && ChaCha8Rng::seed_from_u64(env.seed ^ env.steps as u64).random_bool(step_fault_prob);
        if env.fault_at_step == Some(env.steps) || random_fault {
            return Err(EnvError::StepFault(format!("step {} failed", env.steps)));
        }
        let observation = match action.kind {
            ActionKind::Command => format!("ok: {}", action.payload),
            ActionKind::Edit => "edited".to_string(),
            ActionKind::Finish => "finished".to_string(),
        };
        let last_exit = (action.kind == ActionKind::Command).then_some(0);
        env.state = env.state.successor(action, observation.as_bytes(), last_exit);
        Ok(StepResult { state: env.state.clone(), terminated: action.kind == ActionKind::Finish, observation })
    }

    fn close_env(&mut self, handle: EnvHandle) -> Result<(), EnvError> {
        let env = self.envs.get_mut(&handle.0).ok_or(EnvError::UnknownHandle(handle.0))?;
        if env.closed {
            return Err(EnvError::HandleClosed(handle.0));
        }
        env.closed = true;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ResourceProfile;

    fn req(mode: ExecutionMode) -> ProvisionRequest {
        ProvisionRequest { profile: ResourceProfile::standard(), image: "img".into(), mode }
    }

    fn run(b: &mut SimBackend) {
        while b.step().is_some() {}
    }

    #[test]
    fn ephemeral_lifecycle_and_ready_time() {
        let bus = EventBus::new();
        let mut b = SimBackend::new(SimConfig::distributed(), bus.clone());
        let id = b.provision(&req(ExecutionMode::Ephemeral)).unwrap();
        run(&mut b);
        let evs = bus.replay(0).unwrap();
        let states: Vec<_> = evs.iter().filter_map(|e| e.instance_transition()).map(|(_, to)| to).collect();
        assert_eq!(states, [InstanceState::Provisioning, InstanceState::Running]);
        // boot + single-startup time.
        assert_eq!(evs[1].timestamp, minutes_to_ms(8.0) + minutes_to_ms(1.0));
        b.terminate(&id).unwrap();
        b.terminate(&id).unwrap();
        let last: Vec<_> = bus.replay(3).unwrap().iter().filter_map(|e| e.instance_transition()).map(|(_, to)| to).collect();
        assert_eq!(last, [InstanceState::Draining, InstanceState::Terminated]);
    }

    #[test]
    fn startups_in_one_instant_share_a_concurrency_level() {
        let bus = EventBus::new();
        let mut b = SimBackend::new(SimConfig::distributed(), bus);
        for _ in 0..1000 {
            b.provision(&req(ExecutionMode::Ephemeral)).unwrap();
        }
        run(&mut b);
        assert_eq!(b.startup_log().len(), 1000);
        assert!(b.startup_log().iter().all(|s| s.concurrent == 1000 && (s.minutes - 6.0).abs() < 1e-9));
    }

    #[test]
    fn fleet_cap_and_provision_faults() {
        let cfg = SimConfig { fleet_cap: 2, ..SimConfig::distributed() };
        let bus = EventBus::new();
        let faults = FaultPlan { fail_provision: [2].into(), ..Default::default() };
        let mut b = SimBackend::new(cfg, bus.clone()).with_faults(faults);
        b.provision(&req(ExecutionMode::Persistent)).unwrap();
        b.provision(&req(ExecutionMode::Persistent)).unwrap();
        assert_eq!(b.provision(&req(ExecutionMode::Persistent)), Err(EnvError::FleetCapExceeded { cap: 2 }));
        run(&mut b);
        let terminal: Vec<_> = bus
            .replay(0)
            .unwrap()
            .iter()
            .filter_map(|e| e.instance_transition().map(|(_, to)| (e.subject_id.clone(), to)))
            .filter(|(_, to)| matches!(to, InstanceState::Running | InstanceState::Failed))
            .collect();
        assert_eq!(
            terminal,
            [("i-000001".to_string(), InstanceState::Running), ("i-000002".to_string(), InstanceState::Failed)]
        );
        assert_eq!(b.live_instances(), 1);
    }

    #[test]
    fn scripted_env_steps() {
        let bus = EventBus::new();
        let mut b = SimBackend::new(SimConfig::distributed(), bus);
        let id = b.provision(&req(ExecutionMode::Persistent)).unwrap();
        assert!(matches!(b.open_env(&id, &EnvSpec::image("x")), Err(EnvError::InstanceNotRunning(_))));
        run(&mut b);
        let (h, s0) = b.open_env(&id, &EnvSpec::image("x")).unwrap();
        let r = b.env_step(h, &Action::command("echo ok")).unwrap();
        assert!(!r.terminated);
        assert_eq!(r.state.step_index, s0.step_index + 1);
        assert_ne!(r.state.digest, s0.digest);
        assert!(b.env_step(h, &Action::finish("done")).unwrap().terminated);
        b.close_env(h).unwrap();
        assert_eq!(b.env_step(h, &Action::command("x")), Err(EnvError::HandleClosed(h.0)));
    }
}
