// SPDX-License-Identifier: Apache-2.0

//! Per-phase latency for persistent, ephemeral and centralized execution.
//!
//!     cargo run --release --example latency_breakdown [tasks]

use fleetflow::experiments::{latency_breakdown, LatencyConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tasks = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1_000);
    println!("{:<12} {:>10} {:>8} {:>10} {:>9} {:>8}", "config", "submission", "startup", "scheduling", "execution", "total");
    for config in LatencyConfig::ALL {
        let (p, run) = latency_breakdown(config, tasks, 0)?;
        println!(
            "{:<12} {:>10.2} {:>8.2} {:>10.2} {:>9.2} {:>8.2}   ({} tasks, makespan {:.1} min)",
            config.as_str(),
            p.submission_min,
            p.startup_min,
            p.scheduling_min,
            p.execution_min,
            p.total_min,
            run.tasks.len(),
            run.makespan_min()
        );
    }
    Ok(())
}
