// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Component, Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;
use tempfile::TempDir;

use super::{
    Assignment, ComputeBackend, EnvError, EnvHandle, EnvironmentOps, ProgramContext, ProgramOutcome, Progress,
    ProvisionRequest, StepResult, Workload,
};
use crate::bus::EventBus;
use crate::model::{Action, ActionKind, EnvSpec, EventDraft, ExecutionMode, InstanceState, State, TaskOutcome};
use crate::time::{Clock, Millis, WallClock};

pub const DEFAULT_ALLOWED_COMMANDS: &[&str] = &[
    "echo", "printf", "cat", "ls", "pwd", "true", "false", "exit", "test", "[", "mkdir", "touch", "grep", "wc",
    "head", "tail", "sort", "uniq", "cut", "tr", "cp", "mv", "rm", "sed", "diff", "sleep", "seq",
];

#[derive(Debug, Clone)]
pub struct LocalConfig {
    /// Parent of all instance directories; the system temp dir if unset.
    pub root: Option<PathBuf>,
    pub allowed_commands: BTreeSet<String>,
    pub fleet_cap: u32,
    /// How long a synthetic workload sleeps.
    pub synthetic_ms: Millis,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            root: None,
            allowed_commands: DEFAULT_ALLOWED_COMMANDS.iter().map(|s| s.to_string()).collect(),
            fleet_cap: 64,
            synthetic_ms: 20,
        }
    }
}

struct LocalInst {
    mode: ExecutionMode,
    state: InstanceState,
    root: TempDir,
}

struct LocalEnv {
    dir: TempDir,
    state: State,
    closed: bool,
    steps: u32,
    fault_at_step: Option<u32>,
}

struct Shared {
    cfg: LocalConfig,
    bus: EventBus,
    clock: Arc<dyn Clock>,
    instances: Mutex<BTreeMap<String, LocalInst>>,
    envs: Mutex<BTreeMap<u64, LocalEnv>>,
    next_env: AtomicU64,
    next_instance: AtomicU64,
}

impl Shared {
    fn publish_transition(&self, id: &str, inst: &mut LocalInst, to: InstanceState) {
        let from = inst.state;
        inst.state = to;
        self.bus.publish(EventDraft::instance(id, from, to, inst.mode, self.clock.now()));
    }
}

/// Environment operations scoped to one worker; remembers what it opened
/// so the worker can close it when the task ends.
struct WorkerEnv {
    shared: Arc<Shared>,
    opened: Vec<EnvHandle>,
}

/// Runs tasks as OS threads driving `sh -c` in per-environment temporary
/// directories. Isolation is by working directory and a command allow-list;
/// it is a convenience sandbox, not a security boundary.
pub struct LocalBackend {
    shared: Arc<Shared>,
    workers: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for LocalBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LocalBackend").field("workers", &self.workers.len()).finish()
    }
}

impl LocalBackend {
    pub fn new(cfg: LocalConfig, bus: EventBus) -> Self {
        Self::with_clock(cfg, bus, Arc::new(WallClock::new()))
    }

    pub fn with_clock(cfg: LocalConfig, bus: EventBus, clock: Arc<dyn Clock>) -> Self {
        Self {
            shared: Arc::new(Shared {
                cfg,
                bus,
                clock,
                instances: Mutex::new(BTreeMap::new()),
                envs: Mutex::new(BTreeMap::new()),
                next_env: AtomicU64::new(0),
                next_instance: AtomicU64::new(0),
            }),
            workers: Vec::new(),
        }
    }

    pub fn bus(&self) -> &EventBus {
        &self.shared.bus
    }

    /// Waits for every started task to publish its outcome.
    pub fn join_workers(&mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn env_dir(&self, handle: EnvHandle) -> Option<PathBuf> {
        self.shared.envs.lock().get(&handle.0).map(|e| e.dir.path().to_path_buf())
    }

    fn ops(&self) -> WorkerEnv {
        WorkerEnv { shared: self.shared.clone(), opened: Vec::new() }
    }
}

/// Checks every command word against the allow-list and rejects paths that
/// could leave the working directory.
pub(crate) fn vet_command(cmd: &str, allowed: &BTreeSet<String>) -> Result<(), String> {
    if cmd.contains('`') || cmd.contains("$(") || cmd.contains("${") {
        return Err("command substitution is not permitted".into());
    }
    let segments = cmd.split([';', '|', '&', '\n', '(', ')']);
    for seg in segments {
        let mut words = seg.split_whitespace();
        let Some(first) = words.next() else { continue };
        let prog = first.trim_matches(|c| c == '"' || c == '\'');
        if !allowed.contains(prog) {
            return Err(format!("{prog:?} is not an allowed command"));
        }
        for w in std::iter::once(first).chain(words) {
            let bare = w.trim_start_matches(|c: char| matches!(c, '<' | '>' | '=' | '"' | '\'') || c.is_ascii_digit());
            if bare.starts_with('/') || bare.starts_with('~') || w.contains("..") {
                return Err(format!("path {w:?} escapes the working directory"));
            }
        }
    }
    Ok(())
}

fn safe_relative(path: &str) -> Option<&Path> {
    let p = Path::new(path);
    let ok = !path.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
    ok.then_some(p)
}

impl EnvironmentOps for WorkerEnv {
    fn open_env(&mut self, instance_id: &str, spec: &EnvSpec) -> Result<(EnvHandle, State), EnvError> {
        let dir = {
            let instances = self.shared.instances.lock();
            let inst = instances.get(instance_id).ok_or_else(|| EnvError::UnknownInstance(instance_id.to_string()))?;
            if inst.state != InstanceState::Running {
                return Err(EnvError::InstanceNotRunning(instance_id.to_string()));
            }
            tempfile::Builder::new().prefix("env-").tempdir_in(inst.root.path())?
        };
        if let Some(files) = spec.init.get("files").and_then(|f| f.as_object()) {
            for (name, content) in files {
                let rel = safe_relative(name).ok_or_else(|| EnvError::CommandRejected(format!("bad file name {name:?}")))?;
                let path = dir.path().join(rel);
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                std::fs::write(path, content.as_str().unwrap_or_default())?;
            }
        }
        let handle = self.shared.next_env.fetch_add(1, Ordering::Relaxed) + 1;
        let state = State::initial(format!("{}|{}", spec.image, spec.init).as_bytes());
        let fault_at_step = spec.init.get("fault_at_step").and_then(|v| v.as_u64()).map(|v| v as u32);
        self.shared
            .envs
            .lock()
            .insert(handle, LocalEnv { dir, state: state.clone(), closed: false, steps: 0, fault_at_step });
        self.opened.push(EnvHandle(handle));
        Ok((EnvHandle(handle), state))
    }

    fn env_step(&mut self, handle: EnvHandle, action: &Action) -> Result<StepResult, EnvError> {
        let (dir, state) = {
            let mut envs = self.shared.envs.lock();
            let env = envs.get_mut(&handle.0).ok_or(EnvError::UnknownHandle(handle.0))?;
            if env.closed {
                return Err(EnvError::HandleClosed(handle.0));
            }
            env.steps += 1;
            if env.fault_at_step == Some(env.steps) {
                return Err(EnvError::StepFault(format!("step {} failed", env.steps)));
            }
            (env.dir.path().to_path_buf(), env.state.clone())
        };
        // The subprocess runs without holding any lock.
        let (observation, last_exit, terminated) = match action.kind {
            ActionKind::Command => {
                vet_command(&action.payload, &self.shared.cfg.allowed_commands).map_err(EnvError::CommandRejected)?;
                let out = Command::new("sh")
                    .arg("-c")
                    .arg(&action.payload)
                    .current_dir(&dir)
                    .env_clear()
                    .env("PATH", std::env::var_os("PATH").unwrap_or_default())
                    .env("HOME", &dir)
                    .output()?;
                let mut obs = String::from_utf8_lossy(&out.stdout).into_owned();
                obs.push_str(&String::from_utf8_lossy(&out.stderr));
                (obs, Some(out.status.code().unwrap_or(-1)), false)
            }
            ActionKind::Edit => {
                let (path, content) = action.payload.split_once('\n').unwrap_or((action.payload.as_str(), ""));
                let rel = safe_relative(path.trim()).ok_or_else(|| EnvError::CommandRejected(format!("bad edit path {path:?}")))?;
                let target = dir.join(rel);
                if let Some(parent) = target.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                std::fs::write(&target, content)?;
                (format!("wrote {} bytes", content.len()), None, false)
            }
            ActionKind::Finish => (String::new(), None, true),
        };
        let next = state.successor(action, observation.as_bytes(), last_exit);
        let mut envs = self.shared.envs.lock();
        let env = envs.get_mut(&handle.0).ok_or(EnvError::UnknownHandle(handle.0))?;
        env.state = next.clone();
        Ok(StepResult { state: next, terminated, observation })
    }

    fn close_env(&mut self, handle: EnvHandle) -> Result<(), EnvError> {
        let mut envs = self.shared.envs.lock();
        match envs.get(&handle.0) {
            None => Err(EnvError::UnknownHandle(handle.0)),
            Some(e) if e.closed => Err(EnvError::HandleClosed(handle.0)),
            Some(_) => {
                // Dropping the entry removes the directory.
                envs.remove(&handle.0);
                Ok(())
            }
        }
    }
}

impl EnvironmentOps for LocalBackend {
    fn open_env(&mut self, instance_id: &str, spec: &EnvSpec) -> Result<(EnvHandle, State), EnvError> {
        self.ops().open_env(instance_id, spec)
    }

    fn env_step(&mut self, handle: EnvHandle, action: &Action) -> Result<StepResult, EnvError> {
        self.ops().env_step(handle, action)
    }

    fn close_env(&mut self, handle: EnvHandle) -> Result<(), EnvError> {
        self.ops().close_env(handle)
    }
}

fn run_worker(shared: Arc<Shared>, a: Assignment) {
    let clock = shared.clock.clone();
    let env_ready = clock.now();
    let exec_start = clock.now();
    let mut env = WorkerEnv { shared: shared.clone(), opened: Vec::new() };
    let outcome = match a.workload {
        Workload::Synthetic => {
            std::thread::sleep(Duration::from_millis(shared.cfg.synthetic_ms));
            ProgramOutcome::default()
        }
        Workload::Fixed(ms) => {
            std::thread::sleep(Duration::from_millis(ms));
            ProgramOutcome::default()
        }
        Workload::Program(mut program) => loop {
            let mut ctx =
                ProgramContext { now: clock.now(), task_id: &a.task_id, attempt: a.attempt, instance_id: &a.instance_id, env: &mut env };
            match program.advance(&mut ctx) {
                Progress::Continue(ms) => std::thread::sleep(Duration::from_millis(ms)),
                Progress::Done(o) => break o,
            }
        },
    };
    let exec_end = clock.now();
    for h in std::mem::take(&mut env.opened) {
        let _ = env.close_env(h);
    }
    let done = TaskOutcome {
        attempt: a.attempt,
        instance_id: a.instance_id,
        result_ref: outcome.result_ref,
        exit_status: Some(if outcome.failure.is_some() { 1 } else { 0 }),
        error: outcome.failure.clone(),
        env_ready: Some(env_ready),
        exec_start: Some(exec_start),
        exec_end: Some(exec_end),
    };
    let draft = match outcome.failure {
        Some(_) => EventDraft::task_failed(&a.task_id, done, exec_end),
        None => EventDraft::task_completed(&a.task_id, done, exec_end),
    };
    shared.bus.publish(draft);
}

impl ComputeBackend for LocalBackend {
    fn now(&self) -> Millis {
        self.shared.clock.now()
    }

    fn provision(&mut self, req: &ProvisionRequest) -> Result<String, EnvError> {
        let mut instances = self.shared.instances.lock();
        let live = instances.values().filter(|i| !i.state.is_final()).count() as u32;
        if live >= self.shared.cfg.fleet_cap {
            return Err(EnvError::FleetCapExceeded { cap: self.shared.cfg.fleet_cap });
        }
        let n = self.shared.next_instance.fetch_add(1, Ordering::Relaxed) + 1;
        let id = format!("local-{n:04}");
        let prefix = format!("{id}-");
        let mut builder = tempfile::Builder::new();
        builder.prefix(&prefix);
        let root = match &self.shared.cfg.root {
            Some(r) => {
                std::fs::create_dir_all(r)?;
                builder.tempdir_in(r)?
            }
            None => builder.tempdir()?,
        };
        let mut inst = LocalInst { mode: req.mode, state: InstanceState::Requested, root };
        self.shared.publish_transition(&id, &mut inst, InstanceState::Provisioning);
        self.shared.publish_transition(&id, &mut inst, InstanceState::Running);
        instances.insert(id.clone(), inst);
        Ok(id)
    }

    fn terminate(&mut self, instance_id: &str) -> Result<(), EnvError> {
        let mut instances = self.shared.instances.lock();
        let inst = instances.get_mut(instance_id).ok_or_else(|| EnvError::UnknownInstance(instance_id.to_string()))?;
        if inst.state == InstanceState::Running {
            self.shared.publish_transition(instance_id, inst, InstanceState::Draining);
            self.shared.publish_transition(instance_id, inst, InstanceState::Terminated);
        }
        Ok(())
    }

    fn start_task(&mut self, a: Assignment) -> Result<(), EnvError> {
        {
            let instances = self.shared.instances.lock();
            let inst = instances.get(&a.instance_id).ok_or_else(|| EnvError::UnknownInstance(a.instance_id.clone()))?;
            if inst.state != InstanceState::Running {
                return Err(EnvError::InstanceNotRunning(a.instance_id));
            }
        }
        let shared = self.shared.clone();
        self.workers.retain(|w| !w.is_finished());
        self.workers.push(std::thread::spawn(move || run_worker(shared, a)));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ResourceProfile;

    fn allowed() -> BTreeSet<String> {
        LocalConfig::default().allowed_commands
    }

    #[test]
    fn vetting() {
        let a = allowed();
        assert!(vet_command("echo ok && ls -la | wc -l", &a).is_ok());
        assert!(vet_command("exit 7", &a).is_ok());
        assert!(vet_command("curl http://x", &a).is_err());
        assert!(vet_command("cat /etc/passwd", &a).is_err());
        assert!(vet_command("echo x >/tmp/y", &a).is_err());
        assert!(vet_command("cat ../other/probe", &a).is_err());
        assert!(vet_command("echo $(id)", &a).is_err());
        assert!(vet_command("ls ~", &a).is_err());
    }

    #[test]
    fn exit_status_is_recorded() {
        let mut b = LocalBackend::new(LocalConfig::default(), EventBus::new());
        let req = ProvisionRequest { profile: ResourceProfile::standard(), image: "local".into(), mode: ExecutionMode::Persistent };
        let id = b.provision(&req).unwrap();
        let (h, _) = b.open_env(&id, &EnvSpec::image("local")).unwrap();
        let r = b.env_step(h, &Action::command("exit 7")).unwrap();
        let direct = Command::new("sh").arg("-c").arg("exit 7").status().unwrap().code();
        assert_eq!(r.state.last_exit, direct);
        assert_eq!(r.state.last_exit, Some(7));
        let r = b.env_step(h, &Action::command("echo ok")).unwrap();
        assert_eq!((r.state.last_exit, r.observation.trim()), (Some(0), "ok"));
        b.close_env(h).unwrap();
        assert_eq!(b.close_env(h), Err(EnvError::UnknownHandle(h.0)));
        b.terminate(&id).unwrap();
    }
}
