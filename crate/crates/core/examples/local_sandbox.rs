// SPDX-License-Identifier: Apache-2.0

//! Scripted rollouts against real subprocesses, one scratch directory per
//! environment. Trajectories land in the artifact store.
//!
//!     cargo run --example local_sandbox

use std::sync::Arc;

use fleetflow::agent::{AgentService, RolloutPlan};
use fleetflow::env::LocalConfig;
use fleetflow::limits::Limits;
use fleetflow::model::{Action, AgentTask, ExecutionMode, Trajectory};
use fleetflow::persistence::{task_artifact_key, ArtifactStore, MetadataStore, TRAJECTORY_ARTIFACT};
use fleetflow::policy::{ModelService, Script, ScriptedPolicy};
use fleetflow::runtime::LocalRuntime;
use fleetflow::scheduler::SchedulerConfig;

fn script(key: &str, commands: &[&str]) -> Script {
    Script {
        task_key: key.into(),
        actions: commands.iter().map(|c| Action::command(*c)).collect(),
        finish_at: commands.len() as u32 + 1,
        finish_payload: "pass".into(),
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let policy = ScriptedPolicy::new([
        script("write-and-read", &["echo hello > out.txt", "cat out.txt", "wc -c out.txt"]),
        script("look-around", &["ls", "test -e out.txt", "pwd"]),
    ]);
    let artifacts = Arc::new(ArtifactStore::in_memory());
    let limits = Arc::new(Limits::new(4));
    let model = ModelService::new(limits.clone(), artifacts.clone(), "local").with_policy("scripted", Arc::new(policy));
    let agent = AgentService::new(Arc::new(model), artifacts.clone()).with_round_ms(0);
    let sched = SchedulerConfig { mode_default: ExecutionMode::Ephemeral, ..Default::default() };
    let mut rt = LocalRuntime::build(LocalConfig::default(), sched, limits, Arc::new(MetadataStore::new()));

    let mut plan = RolloutPlan::new(vec![AgentTask::new("write-and-read", "local"), AgentTask::new("look-around", "local")], 1, "scripted");
    plan.run_id = "local".into();
    for r in agent.run_batch(&mut rt, &plan)? {
        println!("{} -> {:?} after {} rounds", r.task_key, r.termination_cause, r.rounds);
        let raw = artifacts.get_artifact(&task_artifact_key("local", &r.task_id, TRAJECTORY_ARTIFACT))?;
        let traj = Trajectory::from_jsonl(std::str::from_utf8(&raw)?)?;
        for step in &traj.steps {
            // A state carries the exit status of the previous action.
            println!("  step {} (prev exit {:?})  {}", step.state.step_index, step.state.last_exit, step.action.payload);
        }
    }
    Ok(())
}
