// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, HashMap};

use parking_lot::Mutex;

use super::StoreError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueueEntry {
    pub seq: u64,
    pub task_id: String,
}

#[derive(Debug, Default)]
struct Inner {
    entries: BTreeMap<u64, String>,
    index: HashMap<String, u64>,
    next_seq: u64,
}

/// In-memory FIFO of task ids ordered by enqueue sequence.
#[derive(Debug, Default)]
pub struct TaskQueue {
    inner: Mutex<Inner>,
}

impl TaskQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends at the tail. Sequence numbers start at 1.
    pub fn enqueue(&self, task_id: &str) -> Result<u64, StoreError> {
        let mut q = self.inner.lock();
        if q.index.contains_key(task_id) {
            return Err(StoreError::DuplicateEnqueue(task_id.to_string()));
        }
        q.next_seq += 1;
        let seq = q.next_seq;
        q.entries.insert(seq, task_id.to_string());
        q.index.insert(task_id.to_string(), seq);
        Ok(seq)
    }

    /// Removes and returns the entry with the lowest outstanding sequence.
    pub fn dequeue(&self) -> Option<QueueEntry> {
        let mut q = self.inner.lock();
        let (seq, task_id) = q.entries.pop_first()?;
        q.index.remove(&task_id);
        Some(QueueEntry { seq, task_id })
    }

    pub fn peek(&self) -> Option<QueueEntry> {
        let q = self.inner.lock();
        q.entries.first_key_value().map(|(s, t)| QueueEntry { seq: *s, task_id: t.clone() })
    }

    /// Pops the head only if it is still `seq`; lets a single dispatcher
    /// admit after peeking without racing other consumers.
    pub fn pop_if_head(&self, seq: u64) -> Option<QueueEntry> {
        let mut q = self.inner.lock();
        match q.entries.first_key_value() {
            Some((s, _)) if *s == seq => {
                let (seq, task_id) = q.entries.pop_first()?;
                q.index.remove(&task_id);
                Some(QueueEntry { seq, task_id })
            }
            _ => None,
        }
    }

    pub fn remove(&self, task_id: &str) -> bool {
        let mut q = self.inner.lock();
        match q.index.remove(task_id) {
            Some(seq) => {
                q.entries.remove(&seq);
                true
            }
            None => false,
        }
    }

    pub fn contains(&self, task_id: &str) -> bool {
        self.inner.lock().index.contains_key(task_id)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
