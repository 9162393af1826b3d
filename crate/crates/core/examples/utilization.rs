// SPDX-License-Identifier: Apache-2.0

//! CPU and memory traces of a large shared host versus a small instance,
//! written as `t_norm,cpu_pct,mem_pct` CSV.
//!
//!     cargo run --example utilization [out_dir]

use std::path::PathBuf;

use fleetflow::env::Strategy;
use fleetflow::experiments::{render_summary, run_experiment, ExperimentKind, ExperimentSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/experiments/utilization".into()));
    for strategy in [Strategy::Centralized, Strategy::Distributed] {
        let report = run_experiment(&ExperimentSpec::new(ExperimentKind::Utilization, strategy), &out)?;
        print!("{}", render_summary(&report.summary));
    }
    println!("traces in {}", out.display());
    Ok(())
}
