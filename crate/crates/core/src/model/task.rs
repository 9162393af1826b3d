// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::trajectory::{ActionKind, GoalEvaluator};
use super::ModelError;
use crate::time::Millis;

pub const DEFAULT_MAX_STEPS: u32 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    /// Container image reference, resolved by the backend.
    pub image: String,
    /// Backend-specific initialisation payload.
    #[serde(default)]
    pub init: serde_json::Value,
}

impl EnvSpec {
    pub fn image(image: impl Into<String>) -> Self {
        Self { image: image.into(), init: serde_json::Value::Null }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionSpace(BTreeSet<ActionKind>);

impl ActionSpace {
    pub fn new(kinds: impl IntoIterator<Item = ActionKind>) -> Self {
        Self(kinds.into_iter().collect())
    }

    pub fn permits(&self, kind: ActionKind) -> bool {
        self.0.contains(&kind)
    }

    pub fn kinds(&self) -> impl Iterator<Item = ActionKind> + '_ {
        self.0.iter().copied()
    }
}

impl Default for ActionSpace {
    fn default() -> Self {
        Self::new(ActionKind::ALL)
    }
}

fn default_max_steps() -> u32 {
    DEFAULT_MAX_STEPS
}

/// An interactive problem: environment, instructions, goal, permitted
/// actions and a step bound. The transition function lives in the backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTask {
    pub task_key: String,
    pub env_spec: EnvSpec,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub goal: GoalEvaluator,
    #[serde(default)]
    pub action_space: ActionSpace,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
}

impl AgentTask {
    pub fn new(task_key: impl Into<String>, image: impl Into<String>) -> Self {
        Self {
            task_key: task_key.into(),
            env_spec: EnvSpec::image(image),
            description: String::new(),
            goal: GoalEvaluator::default(),
            action_space: ActionSpace::default(),
            max_steps: DEFAULT_MAX_STEPS,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.task_key.trim().is_empty() {
            return Err(ModelError::Invalid("task_key must be non-empty".into()));
        }
        if self.env_spec.image.trim().is_empty() {
            return Err(ModelError::Invalid("env_spec.image must be non-empty".into()));
        }
        if self.max_steps == 0 {
            return Err(ModelError::Invalid("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Checks task-key uniqueness and per-task validity across a dataset.
pub fn validate_dataset<'a>(tasks: impl IntoIterator<Item = &'a AgentTask>) -> Result<(), ModelError> {
    let mut seen = BTreeSet::new();
    for t in tasks {
        t.validate()?;
        if !seen.insert(t.task_key.as_str()) {
            return Err(ModelError::Invalid(format!("duplicate task_key {}", t.task_key)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExecutionMode {
    /// A fresh instance per task, deallocated right after.
    #[default]
    Ephemeral,
    /// Pooled, reused instances.
    Persistent,
}

impl ExecutionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecutionMode::Ephemeral => "ephemeral",
            ExecutionMode::Persistent => "persistent",
        }
    }
}

impl fmt::Display for ExecutionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ExecutionMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ephemeral" => Ok(ExecutionMode::Ephemeral),
            "persistent" => Ok(ExecutionMode::Persistent),
            other => Err(ModelError::Invalid(format!("unknown execution mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceProfile {
    pub name: String,
    pub cpu_cores: u32,
    pub memory_gb: u32,
    pub bandwidth_mbps: u32,
    pub max_concurrent_tasks: u32,
    pub hourly_rate_usd: f64,
}

impl ResourceProfile {
    /// 208 cores, 3 TB memory, 1 Gbps; hosts up to 50 tasks.
    pub fn high_spec() -> Self {
        Self {
            name: "high-spec-208c-3tb".into(),
            cpu_cores: 208,
            memory_gb: 3072,
            bandwidth_mbps: 1000,
            max_concurrent_tasks: 50,
            hourly_rate_usd: 20.05,
        }
    }

    /// 8 cores, 16 GB, 100 Mbps; one task per instance.
    pub fn standard() -> Self {
        Self {
            name: "standard-8c-16g".into(),
            cpu_cores: 8,
            memory_gb: 16,
            bandwidth_mbps: 100,
            max_concurrent_tasks: 1,
            hourly_rate_usd: 0.3015,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.cpu_cores == 0 || self.memory_gb == 0 || self.bandwidth_mbps == 0 || self.max_concurrent_tasks == 0 {
            return Err(ModelError::Invalid(format!("profile {} has a zero resource field", self.name)));
        }
        if !(self.hourly_rate_usd >= 0.0) {
            return Err(ModelError::Invalid(format!("profile {} has a negative rate", self.name)));
        }
        Ok(())
    }
}

/// What runs once a task is dispatched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkloadSpec {
    /// Duration drawn from the backend's execution model.
    #[default]
    Synthetic,
    Fixed { duration_ms: Millis },
    /// Agent interaction loop driven by a registered policy.
    Rollout {
        policy_id: String,
        run_id: String,
        replica_index: u32,
        seed: u64,
    },
}

fn one_slot() -> u32 {
    1
}

fn default_owner() -> String {
    "default".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: AgentTask,
    #[serde(default)]
    pub mode: Option<ExecutionMode>,
    /// Capacity slots held while the task runs.
    #[serde(default = "one_slot")]
    pub slots: u32,
    #[serde(default = "default_owner")]
    pub owner: String,
    #[serde(default)]
    pub workload: WorkloadSpec,
}

impl TaskSpec {
    pub fn new(task: AgentTask) -> Self {
        Self { task, mode: None, slots: 1, owner: default_owner(), workload: WorkloadSpec::Synthetic }
    }

    pub fn mode(mut self, mode: ExecutionMode) -> Self {
        self.mode = Some(mode);
        self
    }

    pub fn owner(mut self, owner: impl Into<String>) -> Self {
        self.owner = owner.into();
        self
    }

    pub fn workload(mut self, w: WorkloadSpec) -> Self {
        self.workload = w;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.task.validate()?;
        if self.slots == 0 {
            return Err(ModelError::Invalid("slots must be at least 1".into()));
        }
        if self.owner.is_empty() {
            return Err(ModelError::Invalid("owner must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskStatus {
    Queued,
    Scheduled,
    Provisioning,
    Executing,
    Completed,
    Failed,
    Cancelled,
}

impl TaskStatus {
    pub const ALL: [TaskStatus; 7] = [
        TaskStatus::Queued,
        TaskStatus::Scheduled,
        TaskStatus::Provisioning,
        TaskStatus::Executing,
        TaskStatus::Completed,
        TaskStatus::Failed,
        TaskStatus::Cancelled,
    ];

    pub fn can_transition(self, next: TaskStatus) -> bool {
        use TaskStatus::*;
        matches!(
            (self, next),
            (Queued, Scheduled)
                | (Queued, Cancelled)
                | (Scheduled, Provisioning)
                | (Scheduled, Executing)
                | (Scheduled, Cancelled)
                | (Provisioning, Executing)
                | (Provisioning, Failed)
                | (Executing, Completed)
                | (Executing, Failed)
                | (Failed, Queued)
        )
    }

    /// Terminal unless a retry re-queues a failed task.
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskStatus::Completed | TaskStatus::Failed | TaskStatus::Cancelled)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseTimestamps {
    pub submitted: Option<Millis>,
    pub scheduled: Option<Millis>,
    pub env_ready: Option<Millis>,
    pub exec_start: Option<Millis>,
    pub exec_end: Option<Millis>,
}

impl PhaseTimestamps {
    pub fn in_order(&self) -> [Option<Millis>; 5] {
        [self.submitted, self.scheduled, self.env_ready, self.exec_start, self.exec_end]
    }

    /// Present timestamps are non-decreasing in pipeline order.
    pub fn is_monotone(&self) -> bool {
        let present: Vec<Millis> = self.in_order().into_iter().flatten().collect();
        present.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Lifecycle state of one submitted task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub spec: TaskSpec,
    pub status: TaskStatus,
    pub attempt: u32,
    pub enqueue_seq: u64,
    pub phase_timestamps: PhaseTimestamps,
    #[serde(default)]
    pub result_ref: Option<String>,
    #[serde(default)]
    pub instance_id: Option<String>,
    #[serde(default)]
    pub last_error: Option<String>,
}

impl TaskRecord {
    pub fn new(task_id: impl Into<String>, spec: TaskSpec, submitted_at: Millis) -> Self {
        Self {
            task_id: task_id.into(),
            spec,
            status: TaskStatus::Queued,
            attempt: 0,
            enqueue_seq: 0,
            phase_timestamps: PhaseTimestamps { submitted: Some(submitted_at), ..Default::default() },
            result_ref: None,
            instance_id: None,
            last_error: None,
        }
    }

    pub fn mode(&self, default: ExecutionMode) -> ExecutionMode {
        self.spec.mode.unwrap_or(default)
    }
}

/// Moves a record along the legal status graph, stamping the matching phase.
///
/// `Failed -> Queued` is the retry edge: it bumps `attempt` and clears every
/// phase after submission. The caller assigns the new `enqueue_seq`.
pub fn transition_task_state(mut rec: TaskRecord, next: TaskStatus, now: Millis) -> Result<TaskRecord, ModelError> {
    if !rec.status.can_transition(next) {
        return Err(ModelError::IllegalTransition { from: rec.status, to: next });
    }
    match next {
        TaskStatus::Scheduled => rec.phase_timestamps.scheduled = Some(now),
        TaskStatus::Completed => {
            rec.phase_timestamps.exec_end.get_or_insert(now);
        }
        TaskStatus::Queued => {
            rec.attempt += 1;
            let submitted = rec.phase_timestamps.submitted;
            rec.phase_timestamps = PhaseTimestamps { submitted, ..Default::default() };
            rec.result_ref = None;
            rec.instance_id = None;
        }
        _ => {}
    }
    rec.status = next;
    Ok(rec)
}
