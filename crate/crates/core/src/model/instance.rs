// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::task::{ExecutionMode, ResourceProfile};
use super::ModelError;
use crate::time::Millis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InstanceState {
    Requested,
    Provisioning,
    Running,
    Draining,
    Terminated,
    Failed,
}

impl InstanceState {
    pub fn can_transition(self, next: InstanceState) -> bool {
        use InstanceState::*;
        matches!(
            (self, next),
            (Requested, Provisioning)
                | (Requested, Failed)
                | (Provisioning, Running)
                | (Provisioning, Failed)
                | (Running, Draining)
                | (Running, Failed)
                | (Draining, Terminated)
                | (Draining, Failed)
        )
    }

    pub fn is_final(self) -> bool {
        matches!(self, InstanceState::Terminated | InstanceState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDescriptor {
    pub instance_id: String,
    pub profile: ResourceProfile,
    pub state: InstanceState,
    pub active_tasks: BTreeSet<String>,
    pub mode: ExecutionMode,
    pub created_at: Millis,
    pub terminated_at: Option<Millis>,
    /// Distinct tasks ever attached; at most one for ephemeral instances.
    #[serde(default)]
    pub tasks_served: u32,
}

impl InstanceDescriptor {
    pub fn new(instance_id: impl Into<String>, profile: ResourceProfile, mode: ExecutionMode, created_at: Millis) -> Self {
        Self {
            instance_id: instance_id.into(),
            profile,
            state: InstanceState::Requested,
            active_tasks: BTreeSet::new(),
            mode,
            created_at,
            terminated_at: None,
            tasks_served: 0,
        }
    }

    pub fn transition(&mut self, next: InstanceState, now: Millis) -> Result<(), ModelError> {
        if !self.state.can_transition(next) {
            return Err(ModelError::IllegalInstanceTransition { from: self.state, to: next });
        }
        self.state = next;
        if next.is_final() {
            self.terminated_at = Some(now);
        }
        Ok(())
    }

    pub fn free_slots(&self) -> u32 {
        self.profile.max_concurrent_tasks.saturating_sub(self.active_tasks.len() as u32)
    }

    pub fn attach(&mut self, task_id: &str) -> Result<(), ModelError> {
        if self.state != InstanceState::Running {
            return Err(ModelError::Invalid(format!("instance {} is {:?}, not Running", self.instance_id, self.state)));
        }
        if self.free_slots() == 0 {
            return Err(ModelError::Invalid(format!("instance {} is at capacity", self.instance_id)));
        }
        if self.mode == ExecutionMode::Ephemeral && self.tasks_served >= 1 {
            return Err(ModelError::Invalid(format!("ephemeral instance {} already served a task", self.instance_id)));
        }
        if self.active_tasks.insert(task_id.to_string()) {
            self.tasks_served += 1;
        }
        Ok(())
    }

    pub fn detach(&mut self, task_id: &str) -> bool {
        self.active_tasks.remove(task_id)
    }

    pub fn lifetime_ms(&self) -> Option<Millis> {
        self.terminated_at.map(|t| t.saturating_sub(self.created_at))
    }
}
