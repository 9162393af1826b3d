// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::Strategy;
use crate::model::ExecutionMode;

/// Environment startup time as a function of concurrent startups `c`.
pub trait StartupModel: Send + Sync {
    fn startup_minutes(&self, strategy: Strategy, mode: ExecutionMode, c: u32) -> f64;
}

/// `t1 + slope·(min(c, c_max) − 1)` per curve; persistent distributed
/// environments are reused and take a constant `persistent_min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearStartup {
    pub persistent_min: f64,
    pub ephemeral_t1: f64,
    pub ephemeral_slope: f64,
    pub centralized_t1: f64,
    pub centralized_slope: f64,
    /// Concurrency beyond this adds no further delay.
    pub saturation_c: u32,
}

impl Default for LinearStartup {
    fn default() -> Self {
        Self {
            persistent_min: 0.5,
            ephemeral_t1: 1.0,
            ephemeral_slope: 5.0 / 999.0,
            centralized_t1: 1.0,
            centralized_slope: 12.0 / 999.0,
            saturation_c: 1000,
        }
    }
}

impl StartupModel for LinearStartup {
    fn startup_minutes(&self, strategy: Strategy, mode: ExecutionMode, c: u32) -> f64 {
        let extra = (c.clamp(1, self.saturation_c.max(1)) - 1) as f64;
        match (strategy, mode) {
            (Strategy::Centralized, _) => self.centralized_t1 + self.centralized_slope * extra,
            (Strategy::Distributed, ExecutionMode::Persistent) => self.persistent_min,
            (Strategy::Distributed, ExecutionMode::Ephemeral) => self.ephemeral_t1 + self.ephemeral_slope * extra,
        }
    }
}

/// The default curve.
pub fn startup_time(strategy: Strategy, mode: ExecutionMode, c: u32) -> f64 {
    LinearStartup::default().startup_minutes(strategy, mode, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ExecutionMode::*;

    #[test]
    fn endpoints() {
        assert_eq!(startup_time(Strategy::Distributed, Ephemeral, 1), 1.0);
        assert!((startup_time(Strategy::Distributed, Ephemeral, 1000) - 6.0).abs() < 1e-12);
        assert!((startup_time(Strategy::Centralized, Persistent, 1000) - 13.0).abs() < 1e-12);
        assert_eq!(startup_time(Strategy::Distributed, Persistent, 7), 0.5);
    }

    #[test]
    fn midpoint() {
        let t = startup_time(Strategy::Centralized, Ephemeral, 500);
        assert!((t - (1.0 + 12.0 * 499.0 / 999.0)).abs() < 1e-12);
        assert!((t - 6.99).abs() < 0.01);
    }
}
