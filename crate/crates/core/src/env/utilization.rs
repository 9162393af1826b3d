// SPDX-License-Identifier: Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilizationSample {
    pub t_norm: f64,
    pub cpu_pct: f64,
    pub mem_pct: f64,
}

fn bump(t: f64, center: f64, width: f64) -> f64 {
    (-((t - center) / width).powi(2)).exp()
}

/// Per-instance CPU and memory over normalized execution time.
///
/// Centralized hosts are bursty: CPU spikes early while fifty environments
/// initialise, memory peaks mid-run, and both collapse once the batch
/// drains. Small distributed instances stay flat.
pub fn utilization_trace(strategy: Strategy, samples: usize, seed: u64) -> Vec<UtilizationSample> {
    assert!(samples >= 2, "need at least two samples");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|i| {
            let t = i as f64 / (samples - 1) as f64;
            let (cpu, mem) = match strategy {
                Strategy::Centralized => {
                    let cpu = 1.0 + 24.0 * bump(t, 0.15, 0.08) + rng.random_range(-0.5..0.5);
                    let mem = 3.0 + 47.0 * bump(t, 0.30, 0.07) + rng.random_range(-0.8..0.8);
                    (cpu, mem)
                }
                Strategy::Distributed => (rng.random_range(5.0..=10.0), 12.0 + rng.random_range(-0.8..0.8)),
            };
            UtilizationSample { t_norm: t, cpu_pct: cpu.clamp(0.0, 100.0), mem_pct: mem.clamp(0.0, 100.0) }
        })
        .collect()
}
