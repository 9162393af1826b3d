// SPDX-License-Identifier: Apache-2.0

//! Makespan and cost versus batch size for both fleet strategies.
//!
//!     cargo run --release --example throughput [out_dir]

use std::time::Instant;

use fleetflow::env::Strategy;
use fleetflow::experiments::{render_summary, run_experiment, ExperimentKind, ExperimentSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/experiments/throughput".into());
    for strategy in [Strategy::Distributed, Strategy::Centralized] {
        let spec = ExperimentSpec::new(ExperimentKind::Throughput, strategy);
        let wall = Instant::now();
        let report = run_experiment(&spec, &std::path::Path::new(&out).join(strategy.as_str()))?;
        print!("{}", render_summary(&report.summary));
        println!("wall {:.1}s\n", wall.elapsed().as_secs_f64());
    }
    Ok(())
}
