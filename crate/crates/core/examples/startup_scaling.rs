// SPDX-License-Identifier: Apache-2.0

//! Environment startup time against the number of concurrent startups.
//!
//!     cargo run --example startup_scaling

use fleetflow::env::{startup_time, Strategy};
use fleetflow::model::ExecutionMode;

fn main() {
    println!("{:>7} {:>12} {:>10} {:>11}", "c", "centralized", "ephemeral", "persistent");
    for c in [1, 10, 100, 500, 1_000, 2_000, 10_000] {
        println!(
            "{c:>7} {:>12.2} {:>10.2} {:>11.2}",
            startup_time(Strategy::Centralized, ExecutionMode::Ephemeral, c),
            startup_time(Strategy::Distributed, ExecutionMode::Ephemeral, c),
            startup_time(Strategy::Distributed, ExecutionMode::Persistent, c),
        );
    }
}
