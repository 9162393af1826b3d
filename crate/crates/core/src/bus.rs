// SPDX-License-Identifier: Apache-2.0

//! Ordered, in-process event log with cursor-based subscriptions.
//!
//! Delivery is at-least-once: a subscriber that restarts from its last
//! acknowledged cursor may see events again, never fewer.

use std::collections::{BTreeSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use crate::model::{Event, EventDraft, EventKind};

pub const DEFAULT_RETENTION: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BusError {
    #[error("seq {requested} precedes the retention horizon {horizon}")]
    SeqTruncated { requested: u64, horizon: u64 },
}

struct Log {
    events: VecDeque<Event>,
    last_seq: u64,
}

impl Log {
    fn horizon(&self) -> u64 {
        self.events.front().map_or(self.last_seq + 1, |e| e.seq)
    }

    fn collect(&self, from_seq: u64, kinds: Option<&BTreeSet<EventKind>>, max: usize) -> Result<Vec<Event>, BusError> {
        let from = from_seq.max(1);
        let horizon = self.horizon();
        if from < horizon {
            return Err(BusError::SeqTruncated { requested: from_seq, horizon });
        }
        let skip = ((from - horizon) as usize).min(self.events.len());
        Ok(self
            .events
            .range(skip..)
            .filter(|e| kinds.is_none_or(|k| k.contains(&e.kind)))
            .take(max)
            .cloned()
            .collect())
    }
}

struct Shared {
    log: Mutex<Log>,
    published: Condvar,
    retention: usize,
    journal: Option<Mutex<BufWriter<File>>>,
    next_sub_id: AtomicU64,
}

/// Cheaply cloneable handle to one bus.
#[derive(Clone)]
pub struct EventBus {
    shared: Arc<Shared>,
}

impl Default for EventBus {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for EventBus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "EventBus(last_seq={})", self.last_seq())
    }
}

impl EventBus {
    pub fn new() -> Self {
        Self::with_retention(DEFAULT_RETENTION)
    }

    pub fn with_retention(retention: usize) -> Self {
        Self::build(retention.max(1), None)
    }

    /// A bus that also appends every event to `path` as JSON lines.
    pub fn with_journal(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::build(DEFAULT_RETENTION, Some(Mutex::new(BufWriter::new(file)))))
    }

    fn build(retention: usize, journal: Option<Mutex<BufWriter<File>>>) -> Self {
        Self {
            shared: Arc::new(Shared {
                log: Mutex::new(Log { events: VecDeque::new(), last_seq: 0 }),
                published: Condvar::new(),
                retention,
                journal,
                next_sub_id: AtomicU64::new(1),
            }),
        }
    }

    /// Assigns the next global seq (starting at 1) and appends the event.
    pub fn publish(&self, draft: EventDraft) -> u64 {
        let mut log = self.shared.log.lock();
        log.last_seq += 1;
        let ev = Event::from_draft(log.last_seq, draft);
        if let Some(j) = &self.shared.journal {
            // Written under the log lock so the journal order matches seq order.
            let mut w = j.lock();
            let line = serde_json::to_string(&ev).expect("events serialize");
            if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                log::error!("event journal write failed: {e}");
            }
        }
        let seq = ev.seq;
        log.events.push_back(ev);
        while log.events.len() > self.shared.retention {
            log.events.pop_front();
        }
        drop(log);
        self.shared.published.notify_all();
        seq
    }

    pub fn last_seq(&self) -> u64 {
        self.shared.log.lock().last_seq
    }

    /// First seq still retained.
    pub fn horizon(&self) -> u64 {
        self.shared.log.lock().horizon()
    }

    pub fn len(&self) -> usize {
        self.shared.log.lock().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All retained events with seq ≥ `from_seq`, in order.
    pub fn replay(&self, from_seq: u64) -> Result<Vec<Event>, BusError> {
        self.shared.log.lock().collect(from_seq, None, usize::MAX)
    }

    /// `replay` restricted to `kinds`, at most `max` events.
    pub fn fetch(&self, from_seq: u64, kinds: &BTreeSet<EventKind>, max: usize) -> Result<Vec<Event>, BusError> {
        self.shared.log.lock().collect(from_seq, Some(kinds), max)
    }

    /// Blocks until some event with seq ≥ `from_seq` exists or `timeout` elapses.
    /// Returns whether such an event exists. No busy waiting.
    pub fn wait_beyond(&self, from_seq: u64, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut log = self.shared.log.lock();
        while log.last_seq < from_seq {
            if self.shared.published.wait_until(&mut log, deadline).timed_out() {
                return log.last_seq >= from_seq;
            }
        }
        true
    }

    /// A cursor that starts delivering at `from_seq`.
    pub fn subscribe(&self, kinds: impl IntoIterator<Item = EventKind>, from_seq: u64) -> Subscription {
        Subscription {
            id: self.shared.next_sub_id.fetch_add(1, Ordering::Relaxed),
            kinds: kinds.into_iter().collect(),
            cursor: from_seq.max(1) - 1,
            bus: self.clone(),
        }
    }

    pub fn export_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        let log = self.shared.log.lock();
        for ev in &log.events {
            serde_json::to_writer(&mut w, ev)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.export_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }
}

/// A subscriber's position in the log. `cursor` is the last processed seq.
pub struct Subscription {
    id: u64,
    kinds: BTreeSet<EventKind>,
    cursor: u64,
    bus: EventBus,
}

impl std::fmt::Debug for Subscription {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Subscription").field("id", &self.id).field("kinds", &self.kinds).field("cursor", &self.cursor).finish()
    }
}

impl Subscription {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn kinds(&self) -> &BTreeSet<EventKind> {
        &self.kinds
    }

    /// Pending events without advancing the cursor.
    pub fn peek(&self, max: usize) -> Result<Vec<Event>, BusError> {
        self.bus.fetch(self.cursor + 1, &self.kinds, max)
    }

    /// Marks everything up to and including `seq` as processed.
    pub fn ack(&mut self, seq: u64) {
        self.cursor = self.cursor.max(seq);
    }

    /// Pending events; the cursor advances past everything scanned.
    pub fn poll(&mut self) -> Result<Vec<Event>, BusError> {
        let last = self.bus.last_seq();
        let events = self.bus.fetch(self.cursor + 1, &self.kinds, usize::MAX)?;
        self.cursor = self.cursor.max(last);
        Ok(events)
    }

    /// Like `poll`, but blocks up to `timeout` for at least one new event.
    pub fn wait(&mut self, timeout: Duration) -> Result<Vec<Event>, BusError> {
        let deadline = Instant::now() + timeout;
        loop {
            let events = self.poll()?;
            if !events.is_empty() {
                return Ok(events);
            }
            let now = Instant::now();
            if now >= deadline || !self.bus.wait_beyond(self.cursor + 1, deadline - now) {
                return Ok(Vec::new());
            }
        }
    }

    /// Invokes `handler` serially for each delivered event until `stop`
    /// returns true. The handler only runs when events arrive.
    pub fn run(&mut self, mut handler: impl FnMut(&Event), stop: impl Fn() -> bool, tick: Duration) -> Result<(), BusError> {
        while !stop() {
            for ev in self.wait(tick)? {
                handler(&ev);
            }
        }
        Ok(())
    }
}
