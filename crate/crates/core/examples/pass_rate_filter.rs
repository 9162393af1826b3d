// SPDX-License-Identifier: Apache-2.0

//! Estimate pass rates from replicas and keep only tasks that are neither
//! always solved nor never solved.
//!
//!     cargo run --example pass_rate_filter [dataset.jsonl] [replicas]

use std::sync::Arc;

use fleetflow::agent::{aggregate_metrics, filter_environments, load_dataset, AgentService, RolloutPlan};
use fleetflow::env::SimConfig;
use fleetflow::limits::Limits;
use fleetflow::persistence::{ArtifactStore, MetadataStore};
use fleetflow::policy::{ModelService, RandomPolicy};
use fleetflow::runtime::SimRuntime;
use fleetflow::scheduler::SchedulerConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/data/tasks.jsonl").into());
    let replicas: u32 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(16);
    let tasks = load_dataset(path.as_ref())?;

    let artifacts = Arc::new(ArtifactStore::in_memory());
    let limits = Arc::new(Limits::new(512));
    let model = ModelService::new(limits.clone(), artifacts.clone(), "filter").with_policy("random", Arc::new(RandomPolicy::default()));
    let agent = AgentService::new(Arc::new(model), artifacts);
    let mut rt = SimRuntime::build(SimConfig::distributed(), SchedulerConfig::default(), limits, Arc::new(MetadataStore::new()));

    let results = agent.run_batch(&mut rt, &RolloutPlan::new(tasks, replicas, "random"))?;
    let table = aggregate_metrics(&results)?.pass_rates();
    let kept = filter_environments(&table);
    for (key, rate) in table.rates() {
        println!("{:<20} {rate:>5.2}  {}", key, if kept.contains(key) { "keep" } else { "drop" });
    }
    println!("kept {} of {}", kept.len(), table.len());
    Ok(())
}
