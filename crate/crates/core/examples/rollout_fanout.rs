// SPDX-License-Identifier: Apache-2.0

//! k tasks × n replicas through the agent service on the simulated fleet.
//!
//!     cargo run --release --example rollout_fanout [k] [n]

use std::sync::Arc;

use fleetflow::agent::{aggregate_metrics, AgentService, RolloutPlan};
use fleetflow::env::SimConfig;
use fleetflow::limits::Limits;
use fleetflow::model::{AgentTask, GoalEvaluator};
use fleetflow::persistence::{ArtifactStore, MetadataStore};
use fleetflow::policy::{ModelService, RandomPolicy};
use fleetflow::runtime::SimRuntime;
use fleetflow::scheduler::SchedulerConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let k: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(64);
    let n: u32 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(16);

    let artifacts = Arc::new(ArtifactStore::in_memory());
    let limits = Arc::new(Limits::new(2_000));
    let model = ModelService::new(limits.clone(), artifacts.clone(), "fanout").with_policy("random", Arc::new(RandomPolicy::default()));
    let agent = AgentService::new(Arc::new(model), artifacts.clone());
    let mut rt = SimRuntime::build(SimConfig::distributed(), SchedulerConfig::default(), limits, Arc::new(MetadataStore::new()));

    let tasks = (0..k)
        .map(|i| AgentTask { goal: GoalEvaluator::table([("pass".to_string(), 1.0)], 0.0), ..AgentTask::new(format!("task-{i:03}"), "python:3.11") })
        .collect();
    let mut plan = RolloutPlan::new(tasks, n, "random");
    plan.run_id = "fanout".into();
    let results = agent.run_batch(&mut rt, &plan)?;
    let metrics = aggregate_metrics(&results)?;
    let key = agent.write_metrics(&plan.run_id, &metrics)?;

    println!("{} rollouts over {k} tasks, virtual makespan {:.1} min", results.len(), rt.now() as f64 / 60_000.0);
    println!("mean reward {:.3}, mean rounds {:.1}", metrics.mean_reward, metrics.mean_rounds);
    for (cause, count) in &metrics.causes {
        println!("  {cause:<12} {count}");
    }
    println!("metrics at {key} ({} artifacts stored)", artifacts.list("runs/fanout")?.len());
    Ok(())
}
