// SPDX-License-Identifier: Apache-2.0

//! Domain types: tasks, trajectories, instances and lifecycle events.
//!
//! Everything here is a plain value. Operations take a value and return a
//! new one, so the types can be shared freely across threads.

mod event;
mod instance;
mod task;
mod trajectory;

pub use event::{Event, EventDraft, EventKind, EventPayload, TaskOutcome};
pub use instance::{InstanceDescriptor, InstanceState};
pub use task::{
    transition_task_state, validate_dataset, ActionSpace, AgentTask, EnvSpec, ExecutionMode, PhaseTimestamps,
    ResourceProfile, TaskRecord, TaskSpec, TaskStatus, WorkloadSpec, DEFAULT_MAX_STEPS,
};
pub use trajectory::{
    append_step, finalize_trajectory, Action, ActionKind, ExperienceBatch, GoalEvaluator, GoalSpec, State, Step,
    TerminationCause, Trajectory, DEFAULT_NON_TERMINATION_PENALTY,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("trajectory is already terminated")]
    AppendAfterTermination,
    #[error("trajectory reached max_steps={max_steps}; finalize with step_limit")]
    StepLimitExceeded { max_steps: u32 },
    #[error("action kind {0:?} is not in the task's action space")]
    ActionNotPermitted(ActionKind),
    #[error("state step_index {got} does not follow {expected}")]
    StepIndexGap { expected: u32, got: u32 },
    #[error("trajectory is already finalized")]
    AlreadyFinalized,
    #[error("trajectory terminated by {existing:?}, cannot finalize as {requested:?}")]
    CauseConflict { existing: TerminationCause, requested: TerminationCause },
    #[error("finish cause requires a finish action")]
    FinishWithoutAction,
    #[error("illegal task transition {from:?} -> {to:?}")]
    IllegalTransition { from: TaskStatus, to: TaskStatus },
    #[error("illegal instance transition {from:?} -> {to:?}")]
    IllegalInstanceTransition { from: InstanceState, to: InstanceState },
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("decode: {0}")]
    Decode(String),
}
