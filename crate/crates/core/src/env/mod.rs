// SPDX-License-Identifier: Apache-2.0

//! Instance lifecycle and environment interaction behind one backend
//! interface, with a simulated cloud and a local-subprocess implementation.

mod config;
mod exec;
mod local;
mod simulated;
mod startup;
mod utilization;

pub use config::{SimConfig, Strategy};
pub use exec::ExecutionModel;
pub use local::{LocalBackend, LocalConfig, DEFAULT_ALLOWED_COMMANDS};
pub use simulated::{FaultPlan, SimBackend};
pub use startup::{startup_time, LinearStartup, StartupModel};
pub use utilization::{utilization_trace, UtilizationSample};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Action, EnvSpec, ExecutionMode, ResourceProfile, State};
use crate::time::Millis;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("fleet cap of {cap} instances reached")]
    FleetCapExceeded { cap: u32 },
    #[error("simulated provisioning fault")]
    ProvisionFault,
    #[error("unknown instance {0}")]
    UnknownInstance(String),
    #[error("instance {0} is not running")]
    InstanceNotRunning(String),
    #[error("environment handle {0} is closed")]
    HandleClosed(u64),
    #[error("unknown environment handle {0}")]
    UnknownHandle(u64),
    #[error("step fault: {0}")]
    StepFault(String),
    #[error("command rejected: {0}")]
    CommandRejected(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for EnvError {
    fn from(e: std::io::Error) -> Self {
        EnvError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnvHandle(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: State,
    pub terminated: bool,
    pub observation: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProvisionRequest {
    pub profile: ResourceProfile,
    pub image: String,
    pub mode: ExecutionMode,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProgramOutcome {
    pub result_ref: Option<String>,
    /// Set when the attempt should count as failed (and be retried).
    pub failure: Option<String>,
}

pub enum Progress {
    /// Call `advance` again after this many milliseconds.
    Continue(Millis),
    Done(ProgramOutcome),
}

pub struct ProgramContext<'a> {
    pub now: Millis,
    pub task_id: &'a str,
    pub attempt: u32,
    pub instance_id: &'a str,
    pub env: &'a mut dyn EnvironmentOps,
}

/// A resumable unit of work run on an instance, e.g. an agent rollout.
pub trait TaskProgram: Send {
    fn advance(&mut self, ctx: &mut ProgramContext<'_>) -> Progress;
}

pub enum Workload {
    /// Duration drawn from the backend's execution model.
    Synthetic,
    Fixed(Millis),
    Program(Box<dyn TaskProgram>),
}

impl std::fmt::Debug for Workload {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Workload::Synthetic => f.write_str("Synthetic"),
            Workload::Fixed(ms) => write!(f, "Fixed({ms})"),
            Workload::Program(_) => f.write_str("Program"),
        }
    }
}

#[derive(Debug)]
pub struct Assignment {
    pub task_id: String,
    pub attempt: u32,
    pub instance_id: String,
    pub env_spec: EnvSpec,
    pub workload: Workload,
}

pub trait EnvironmentOps {
    fn open_env(&mut self, instance_id: &str, spec: &EnvSpec) -> Result<(EnvHandle, State), EnvError>;
    fn env_step(&mut self, handle: EnvHandle, action: &Action) -> Result<StepResult, EnvError>;
    fn close_env(&mut self, handle: EnvHandle) -> Result<(), EnvError>;
}

/// Lifecycle operations are asynchronous: their effects arrive later as
/// `InstanceStateChanged`, `TaskCompleted` and `TaskFailed` events on the bus.
pub trait ComputeBackend: EnvironmentOps + Send {
    fn now(&self) -> Millis;

    /// Every accepted request eventually yields exactly one of Running or Failed.
    fn provision(&mut self, req: &ProvisionRequest) -> Result<String, EnvError>;

    /// Idempotent.
    fn terminate(&mut self, instance_id: &str) -> Result<(), EnvError>;

    fn start_task(&mut self, assignment: Assignment) -> Result<(), EnvError>;
}
