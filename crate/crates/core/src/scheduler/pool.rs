// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;

/// Where the next persistent task should go.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PoolPick {
    /// A running member with a free slot.
    Running(String),
    /// A member still provisioning, with a slot not yet promised.
    Pending(String),
    /// Room to grow the pool.
    New,
}

/// Membership and free-slot bookkeeping for persistent instances. Lowest
/// instance id wins ties so placement is deterministic.
#[derive(Debug, Clone, Default)]
pub struct InstancePool {
    pool_max: u32,
    members: BTreeSet<String>,
    running_free: BTreeSet<String>,
    pending_free: BTreeSet<String>,
    busy: BTreeSet<String>,
}

impl InstancePool {
    pub fn new(pool_max: u32) -> Self {
        Self { pool_max, ..Default::default() }
    }

    pub fn pool_max(&self) -> u32 {
        self.pool_max
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.members.contains(id)
    }

    pub fn members(&self) -> impl Iterator<Item = &String> {
        self.members.iter()
    }

    /// Members with no task bound.
    pub fn idle(&self) -> impl Iterator<Item = &String> {
        self.members.iter().filter(|m| !self.busy.contains(*m))
    }

    pub fn pick(&self) -> Option<PoolPick> {
        if let Some(id) = self.running_free.first() {
            return Some(PoolPick::Running(id.clone()));
        }
        if let Some(id) = self.pending_free.first() {
            return Some(PoolPick::Pending(id.clone()));
        }
        ((self.members.len() as u32) < self.pool_max).then_some(PoolPick::New)
    }

    pub fn add(&mut self, id: &str) {
        self.members.insert(id.to_string());
    }

    /// Records the member's current readiness and load.
    pub fn update(&mut self, id: &str, running: bool, bound: usize, has_room: bool) {
        if !self.members.contains(id) {
            return;
        }
        self.running_free.remove(id);
        self.pending_free.remove(id);
        if has_room {
            if running {
                self.running_free.insert(id.to_string());
            } else {
                self.pending_free.insert(id.to_string());
            }
        }
        if bound > 0 {
            self.busy.insert(id.to_string());
        } else {
            self.busy.remove(id);
        }
    }

    /// Stops offering the member for placement without removing it.
    pub fn withhold(&mut self, id: &str) {
        self.running_free.remove(id);
        self.pending_free.remove(id);
    }

    pub fn remove(&mut self, id: &str) {
        self.members.remove(id);
        self.busy.remove(id);
        self.withhold(id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefers_running_then_pending_then_growth() {
        let mut p = InstancePool::new(2);
        assert_eq!(p.pick(), Some(PoolPick::New));
        p.add("i-2");
        p.update("i-2", false, 0, true);
        assert_eq!(p.pick(), Some(PoolPick::Pending("i-2".into())));
        p.add("i-1");
        p.update("i-1", true, 1, true);
        assert_eq!(p.pick(), Some(PoolPick::Running("i-1".into())));
        p.update("i-1", true, 1, false);
        p.update("i-2", false, 1, false);
        assert_eq!(p.pick(), None);
        assert_eq!(p.idle().count(), 0);
        p.remove("i-2");
        assert_eq!(p.pick(), Some(PoolPick::New));
    }
}
