// SPDX-License-Identifier: Apache-2.0

//! Millisecond timestamps and the clock interface shared by simulated and
//! wall-clock execution.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

/// Milliseconds since the clock's origin.
pub type Millis = u64;

pub const MS_PER_MINUTE: f64 = 60_000.0;
pub const MS_PER_HOUR: f64 = 3_600_000.0;

/// Converts fractional minutes to whole milliseconds (round half away from zero).
pub fn minutes_to_ms(minutes: f64) -> Millis {
    if minutes <= 0.0 {
        return 0;
    }
    (minutes * MS_PER_MINUTE).round() as Millis
}

pub fn ms_to_minutes(ms: Millis) -> f64 {
    ms as f64 / MS_PER_MINUTE
}

pub fn ms_to_hours(ms: Millis) -> f64 {
    ms as f64 / MS_PER_HOUR
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Millis;
}

/// A clock that only moves when the simulation engine advances it.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock {
    now: Arc<AtomicU64>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    /// Moves the clock forward. Panics if asked to move backwards.
    pub fn advance_to(&self, t: Millis) {
        let prev = self.now.swap(t, Ordering::SeqCst);
        assert!(prev <= t, "virtual clock moved backwards: {prev} -> {t}");
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Millis {
        self.now.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone)]
pub struct WallClock {
    origin: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> Millis {
        self.origin.elapsed().as_millis() as Millis
    }
}
