// SPDX-License-Identifier: Apache-2.0

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

/// Lognormal execution time with a contention multiplier for co-located tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionModel {
    pub mean_min: f64,
    /// Shape parameter of the underlying normal.
    pub sigma: f64,
    /// Relative slowdown per additional co-located task.
    pub inflation_per_task: f64,
}

impl Default for ExecutionModel {
    fn default() -> Self {
        Self { mean_min: 73.0, sigma: 0.005, inflation_per_task: 0.0 }
    }
}

impl ExecutionModel {
    /// 1 for a task running alone.
    pub fn inflation(&self, colocated: u32) -> f64 {
        1.0 + self.inflation_per_task * colocated.saturating_sub(1) as f64
    }

    pub fn sample_minutes(&self, rng: &mut impl Rng, colocated: u32) -> f64 {
        let base = if self.sigma > 0.0 {
            // Pick mu so that the distribution mean is exactly `mean_min`.
            let mu = self.mean_min.ln() - self.sigma * self.sigma / 2.0;
            LogNormal::new(mu, self.sigma).expect("valid lognormal").sample(rng)
        } else {
            self.mean_min
        };
        base * self.inflation(colocated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inflation_is_one_when_alone() {
        let m = ExecutionModel { inflation_per_task: 0.3, ..Default::default() };
        assert_eq!(m.inflation(1), 1.0);
        assert!(m.inflation(50) > 1.0);
    }

    #[test]
    fn sample_mean_tracks_configured_mean() {
        let m = ExecutionModel { sigma: 0.05, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mean = (0..10_000).map(|_| m.sample_minutes(&mut rng, 1)).sum::<f64>() / 10_000.0;
        assert!((71.0..=75.0).contains(&mean), "{mean}");
    }
}
