// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::LimitError;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OwnerQuota {
    /// Instance-hours; `None` means unlimited.
    #[serde(default)]
    pub instance_hours: Option<f64>,
    #[serde(default)]
    pub max_in_flight: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OwnerUsage {
    pub quota: OwnerQuota,
    pub consumed: f64,
    pub reserved: f64,
    pub in_flight: u32,
}

impl OwnerUsage {
    pub fn remaining(&self) -> Option<f64> {
        self.quota.instance_hours.map(|l| (l - self.consumed - self.reserved).max(0.0))
    }
}

/// An admitted reservation, to be settled exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct Reservation {
    pub owner: String,
    pub hours: f64,
}

// Tolerates float dust when a reservation exactly fills the budget.
const EPS: f64 = 1e-9;

/// Tier 3: per-owner instance-hour budgets and in-flight caps.
#[derive(Debug, Default)]
pub struct QuotaLedger {
    owners: Mutex<BTreeMap<String, OwnerUsage>>,
}

impl QuotaLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_quota(&self, owner: &str, quota: OwnerQuota) {
        self.owners.lock().entry(owner.to_string()).or_default().quota = quota;
    }

    pub fn usage(&self, owner: &str) -> OwnerUsage {
        self.owners.lock().get(owner).cloned().unwrap_or_default()
    }

    pub fn snapshot(&self) -> BTreeMap<String, OwnerUsage> {
        self.owners.lock().clone()
    }

    pub fn admit(&self, owner: &str, estimated_hours: f64) -> Result<Reservation, LimitError> {
        assert!(estimated_hours >= 0.0, "estimates are non-negative");
        let mut owners = self.owners.lock();
        let u = owners.entry(owner.to_string()).or_default();
        if let Some(cap) = u.quota.max_in_flight {
            if u.in_flight >= cap {
                return Err(LimitError::InFlightExceeded { owner: owner.to_string(), limit: cap });
            }
        }
        if let Some(remaining) = u.remaining() {
            if estimated_hours > remaining + EPS {
                return Err(LimitError::QuotaExceeded { owner: owner.to_string(), remaining_hours: remaining });
            }
        }
        u.reserved += estimated_hours;
        u.in_flight += 1;
        Ok(Reservation { owner: owner.to_string(), hours: estimated_hours })
    }

    /// Replaces the reservation with what was actually used.
    pub fn settle(&self, r: Reservation, actual_hours: f64) {
        let mut owners = self.owners.lock();
        let u = owners.entry(r.owner).or_default();
        u.reserved = (u.reserved - r.hours).max(0.0);
        u.consumed += actual_hours.max(0.0);
        u.in_flight = u.in_flight.saturating_sub(1);
    }
}
