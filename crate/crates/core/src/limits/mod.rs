// SPDX-License-Identifier: Apache-2.0

//! The three admission tiers: model-call rate, slot capacity, owner quotas.

mod capacity;
mod quota;
mod rate;

pub use capacity::{CapacitySemaphore, Ticket};
pub use quota::{OwnerQuota, OwnerUsage, QuotaLedger, Reservation};
pub use rate::{RateConfig, RateGate, RateLimiter};

use thiserror::Error;

use crate::time::Millis;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LimitError {
    #[error("request for {requested} slots exceeds total capacity {capacity}")]
    RequestExceedsTotalCapacity { requested: u32, capacity: u32 },
    #[error("ticket {0} was already released")]
    DoubleRelease(u64),
    #[error("quota exceeded for {owner}: {remaining_hours:.3} instance-hours remaining")]
    QuotaExceeded { owner: String, remaining_hours: f64 },
    #[error("{owner} already has {limit} tasks in flight")]
    InFlightExceeded { owner: String, limit: u32 },
    #[error("capacity is fully held")]
    CapacityBusy,
    #[error("rate limited; retry after {0} ms")]
    RateLimited(Millis),
}

/// Which tiers are enforced. All on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tiers {
    pub rate: bool,
    pub capacity: bool,
    pub quota: bool,
}

impl Default for Tiers {
    fn default() -> Self {
        Self { rate: true, capacity: true, quota: true }
    }
}

/// What a task holds between admission and completion.
#[derive(Debug, Clone, PartialEq)]
pub struct Admission {
    pub reservation: Option<Reservation>,
    pub ticket: Option<Ticket>,
}

#[derive(Debug)]
pub struct Limits {
    pub rate: RateLimiter,
    pub capacity: CapacitySemaphore,
    pub quota: QuotaLedger,
    pub tiers: Tiers,
}

impl Limits {
    pub fn new(capacity: u32) -> Self {
        Self { rate: RateLimiter::unlimited(), capacity: CapacitySemaphore::new(capacity), quota: QuotaLedger::new(), tiers: Tiers::default() }
    }

    /// Quota first, then capacity. A capacity denial rolls the quota back.
    pub fn admit_task(&self, owner: &str, estimated_hours: f64, slots: u32) -> Result<Admission, LimitError> {
        let reservation = if self.tiers.quota { Some(self.quota.admit(owner, estimated_hours)?) } else { None };
        let ticket = if self.tiers.capacity {
            match self.capacity.try_acquire(slots) {
                Ok(Some(t)) => Some(t),
                Ok(None) => {
                    if let Some(r) = reservation {
                        self.quota.settle(r, 0.0);
                    }
                    return Err(LimitError::CapacityBusy);
                }
                Err(e) => {
                    if let Some(r) = reservation {
                        self.quota.settle(r, 0.0);
                    }
                    return Err(e);
                }
            }
        } else {
            None
        };
        Ok(Admission { reservation, ticket })
    }

    /// Releases the slots and settles the quota with actual usage.
    pub fn finish_task(&self, admission: Admission, actual_hours: f64) -> Result<(), LimitError> {
        if let Some(r) = admission.reservation {
            self.quota.settle(r, actual_hours);
        }
        match admission.ticket {
            Some(t) => self.capacity.release(t),
            None => Ok(()),
        }
    }

    /// Tier 1, checked per model call rather than at admission.
    pub fn model_call(&self, owner: &str, now: Millis) -> Result<(), LimitError> {
        if !self.tiers.rate {
            return Ok(());
        }
        self.rate.acquire(owner, now).map_err(LimitError::RateLimited)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_denial_rolls_back_quota() {
        let l = Limits::new(1);
        l.quota.set_quota("o", OwnerQuota { instance_hours: Some(10.0), max_in_flight: None });
        let a = l.admit_task("o", 2.0, 1).unwrap();
        assert_eq!(l.admit_task("o", 2.0, 1), Err(LimitError::CapacityBusy));
        assert_eq!(l.quota.usage("o").reserved, 2.0);
        l.finish_task(a, 1.5).unwrap();
        let u = l.quota.usage("o");
        assert_eq!((u.reserved, u.consumed, u.in_flight), (0.0, 1.5, 0));
        assert_eq!(l.capacity.held(), 0);
    }
}
