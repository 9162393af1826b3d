// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::instance::InstanceState;
use super::task::ExecutionMode;
use crate::time::Millis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    InstanceStateChanged,
    TaskCompleted,
    TaskFailed,
}

impl EventKind {
    pub const ALL: [EventKind; 3] = [EventKind::InstanceStateChanged, EventKind::TaskCompleted, EventKind::TaskFailed];
}

/// Phase timings measured by the backend for one execution attempt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub attempt: u32,
    pub instance_id: String,
    #[serde(default)]
    pub result_ref: Option<String>,
    #[serde(default)]
    pub exit_status: Option<i32>,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub env_ready: Option<Millis>,
    #[serde(default)]
    pub exec_start: Option<Millis>,
    #[serde(default)]
    pub exec_end: Option<Millis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventPayload {
    InstanceState {
        from: InstanceState,
        to: InstanceState,
        mode: ExecutionMode,
    },
    Task(TaskOutcome),
}

/// An event before the bus assigns its sequence number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventDraft {
    pub kind: EventKind,
    pub subject_id: String,
    pub payload: EventPayload,
    pub timestamp: Millis,
}

impl EventDraft {
    pub fn instance(instance_id: &str, from: InstanceState, to: InstanceState, mode: ExecutionMode, at: Millis) -> Self {
        Self {
            kind: EventKind::InstanceStateChanged,
            subject_id: instance_id.to_string(),
            payload: EventPayload::InstanceState { from, to, mode },
            timestamp: at,
        }
    }

    pub fn task_completed(task_id: &str, outcome: TaskOutcome, at: Millis) -> Self {
        Self { kind: EventKind::TaskCompleted, subject_id: task_id.to_string(), payload: EventPayload::Task(outcome), timestamp: at }
    }

    pub fn task_failed(task_id: &str, outcome: TaskOutcome, at: Millis) -> Self {
        Self { kind: EventKind::TaskFailed, subject_id: task_id.to_string(), payload: EventPayload::Task(outcome), timestamp: at }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub kind: EventKind,
    pub subject_id: String,
    pub payload: EventPayload,
    pub timestamp: Millis,
}

impl Event {
    pub fn from_draft(seq: u64, d: EventDraft) -> Self {
        Self { seq, kind: d.kind, subject_id: d.subject_id, payload: d.payload, timestamp: d.timestamp }
    }

    pub fn instance_transition(&self) -> Option<(InstanceState, InstanceState)> {
        match self.payload {
            EventPayload::InstanceState { from, to, .. } => Some((from, to)),
            _ => None,
        }
    }

    pub fn task_outcome(&self) -> Option<&TaskOutcome> {
        match &self.payload {
            EventPayload::Task(o) => Some(o),
            _ => None,
        }
    }
}
