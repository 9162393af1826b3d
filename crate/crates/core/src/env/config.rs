// SPDX-License-Identifier: Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::exec::ExecutionModel;
use super::startup::LinearStartup;
use crate::model::ResourceProfile;

/// Few large machines versus many small ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Centralized,
    Distributed,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Centralized => "centralized",
            Strategy::Distributed => "distributed",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "centralized" | "centralised" => Ok(Strategy::Centralized),
            "distributed" => Ok(Strategy::Distributed),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

/// Calibration of the simulated cloud. All durations are in minutes.
///
/// The presets are fitted to the published throughput, cost and latency
/// figures; none of the individual phase durations are measured values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub strategy: Strategy,
    pub profile: ResourceProfile,
    pub fleet_cap: u32,
    /// Client submission to control-plane admission.
    pub ingest_min: f64,
    /// Instance request to operating system up.
    pub boot_min: f64,
    pub startup: LinearStartup,
    /// Environment ready to agent loop started.
    pub dispatch_min: f64,
    pub exec: ExecutionModel,
    /// Execution end to result collected and completion published.
    pub collect_min: f64,
    pub provision_fault_prob: f64,
    pub step_fault_prob: f64,
    /// Carried for reporting; image pressure acts only through startup times.
    pub image_size_gb: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn distributed() -> Self {
        Self {
            strategy: Strategy::Distributed,
            profile: ResourceProfile::standard(),
            fleet_cap: 10_000,
            ingest_min: 1.0,
            boot_min: 8.0,
            startup: LinearStartup::default(),
            dispatch_min: 0.5,
            exec: ExecutionModel::default(),
            collect_min: 16.0,
            provision_fault_prob: 0.0,
            step_fault_prob: 0.0,
            image_size_gb: 10.0,
            seed: 0,
        }
    }

    pub fn centralized() -> Self {
        Self {
            strategy: Strategy::Centralized,
            profile: ResourceProfile::high_spec(),
            fleet_cap: 40,
            ingest_min: 1.0,
            boot_min: 19.0,
            startup: LinearStartup::default(),
            dispatch_min: 2.0,
            exec: ExecutionModel { inflation_per_task: 1e-4, ..ExecutionModel::default() },
            collect_min: 0.5,
            provision_fault_prob: 0.0,
            step_fault_prob: 0.0,
            image_size_gb: 10.0,
            seed: 0,
        }
    }

    pub fn for_strategy(strategy: Strategy) -> Self {
        match strategy {
            Strategy::Centralized => Self::centralized(),
            Strategy::Distributed => Self::distributed(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Task slots across the whole fleet.
    pub fn fleet_slots(&self) -> u64 {
        self.fleet_cap as u64 * self.profile.max_concurrent_tasks as u64
    }

    pub fn validate(&self) -> Result<(), String> {
        self.profile.validate().map_err(|e| e.to_string())?;
        let durations = [
            ("ingest_min", self.ingest_min),
            ("boot_min", self.boot_min),
            ("dispatch_min", self.dispatch_min),
            ("collect_min", self.collect_min),
            ("startup.persistent_min", self.startup.persistent_min),
            ("startup.ephemeral_t1", self.startup.ephemeral_t1),
            ("startup.centralized_t1", self.startup.centralized_t1),
        ];
        for (name, v) in durations {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be a non-negative duration"));
            }
        }
        if !(self.exec.mean_min > 0.0 && self.exec.sigma >= 0.0 && self.exec.inflation_per_task >= 0.0) {
            return Err("execution model needs mean > 0 and non-negative sigma/inflation".into());
        }
        if self.startup.ephemeral_slope < 0.0 || self.startup.centralized_slope < 0.0 {
            return Err("startup slopes must be non-negative".into());
        }
        if self.fleet_cap == 0 {
            return Err("fleet_cap must be positive".into());
        }
        for (name, p) in [("provision_fault_prob", self.provision_fault_prob), ("step_fault_prob", self.step_fault_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be within [0, 1]"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_fix_slots_and_fleet() {
        let c = SimConfig::centralized();
        assert_eq!((c.profile.max_concurrent_tasks, c.fleet_cap, c.fleet_slots()), (50, 40, 2_000));
        let d = SimConfig::distributed();
        assert_eq!((d.profile.max_concurrent_tasks, d.fleet_cap), (1, 10_000));
        c.validate().unwrap();
        d.validate().unwrap();
    }

    #[test]
    fn strategy_parses() {
        assert_eq!("Distributed".parse::<Strategy>().unwrap(), Strategy::Distributed);
        assert!("hybrid".parse::<Strategy>().is_err());
    }
}
