// SPDX-License-Identifier: Apache-2.0

//! Resolve configuration the way the CLI does: an explicit path, else the
//! file named by `MEGAFLOW_CONFIG`, else built-in defaults.
//!
//!     MEGAFLOW_CONFIG=crates/core/examples/data/fleet.toml cargo run --example load_config

use fleetflow::config::Config;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let explicit = std::env::args().nth(1);
    let cfg = Config::resolve(explicit.as_deref().map(std::path::Path::new))?;
    let sched = cfg.scheduler_config();
    println!("strategy      {}", cfg.sim.strategy);
    println!("seed          {}", cfg.sim.seed);
    println!("fleet cap     {} instances x {} tasks", cfg.sim.fleet_cap, cfg.sim.profile.max_concurrent_tasks);
    println!("boot          {} min", cfg.sim.boot_min);
    println!("capacity      {} slots", cfg.capacity());
    println!("mode default  {:?}, pool_max {}, retry_max {}", sched.mode_default, sched.pool_max, sched.retry_max);
    println!("rate limits   global {:?}, per owner {:?}", cfg.limits.model_calls_per_sec, cfg.limits.per_owner_calls_per_sec);
    println!("quotas        {:?}", cfg.limits.quota);
    println!("bind          {}", cfg.gateway.bind);
    Ok(())
}
