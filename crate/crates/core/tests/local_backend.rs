// SPDX-License-Identifier: Apache-2.0

use std::process::Command;
use std::sync::Arc;

use fleetflow::agent::{AgentService, RolloutPlan};
use fleetflow::bus::EventBus;
use fleetflow::env::{ComputeBackend, EnvError, EnvironmentOps, LocalBackend, LocalConfig, ProvisionRequest};
use fleetflow::limits::Limits;
use fleetflow::model::{Action, AgentTask, EnvSpec, ExecutionMode, ResourceProfile, TerminationCause, Trajectory};
use fleetflow::persistence::{task_artifact_key, ArtifactStore, MetadataStore, TRAJECTORY_ARTIFACT};
use fleetflow::policy::{ModelService, Script, ScriptedPolicy};
use fleetflow::runtime::{Driver, LocalRuntime};
use fleetflow::scheduler::SchedulerConfig;

fn running_instance(b: &mut LocalBackend) -> String {
    let req = ProvisionRequest { profile: ResourceProfile::standard(), image: "local".into(), mode: ExecutionMode::Persistent };
    b.provision(&req).unwrap()
}

#[test]
fn concurrent_environments_cannot_see_each_other() {
    let mut b = LocalBackend::new(LocalConfig::default(), EventBus::new());
    let (i1, i2) = (running_instance(&mut b), running_instance(&mut b));
    let (a, _) = b.open_env(&i1, &EnvSpec::image("local")).unwrap();
    let (c, _) = b.open_env(&i2, &EnvSpec::image("local")).unwrap();
    // Two environments on the same instance are separated as well.
    let (d, _) = b.open_env(&i1, &EnvSpec::image("local")).unwrap();

    assert_eq!(b.env_step(a, &Action::command("touch probe")).unwrap().state.last_exit, Some(0));
    assert_eq!(b.env_step(a, &Action::command("test -e probe")).unwrap().state.last_exit, Some(0));
    for other in [c, d] {
        let r = b.env_step(other, &Action::command("test -e probe")).unwrap();
        assert_eq!(r.state.last_exit, Some(1));
        let r = b.env_step(other, &Action::command("ls")).unwrap();
        assert_eq!(r.observation.trim(), "");
    }
    let dir_a = b.env_dir(a).unwrap();
    assert!(dir_a.join("probe").exists());
    // Reaching into A's directory by path is refused before anything runs.
    let probe = dir_a.join("probe");
    let escape = format!("cat {}", probe.display());
    assert!(matches!(b.env_step(c, &Action::command(&escape)), Err(EnvError::CommandRejected(_))));
    assert!(matches!(b.env_step(c, &Action::command("cat ../probe")), Err(EnvError::CommandRejected(_))));

    for h in [a, c, d] {
        b.close_env(h).unwrap();
    }
    assert!(!dir_a.exists(), "closing removes the working directory");
}

#[test]
fn exit_status_matches_direct_execution() {
    let mut b = LocalBackend::new(LocalConfig::default(), EventBus::new());
    let i = running_instance(&mut b);
    let (h, _) = b.open_env(&i, &EnvSpec::image("local")).unwrap();
    for cmd in ["exit 7", "true", "false", "test 1 -eq 2", "echo hi | grep -q hi"] {
        let direct = Command::new("sh").arg("-c").arg(cmd).status().unwrap().code();
        assert_eq!(b.env_step(h, &Action::command(cmd)).unwrap().state.last_exit, direct, "{cmd}");
    }
}

fn script(key: &str, mine: &str, theirs: &str) -> Script {
    Script {
        task_key: key.into(),
        actions: vec![
            Action::command(format!("touch {mine}")),
            Action::command("sleep 0.3"),
            Action::command(format!("test -e {mine}")),
            Action::command(format!("test -e {theirs}")),
        ],
        finish_at: 5,
        finish_payload: String::new(),
    }
}

/// Two rollouts run side by side on the local runtime, each probing for the
/// other's file while both are alive.
#[test]
fn concurrent_rollouts_are_isolated() {
    let artifacts = Arc::new(ArtifactStore::in_memory());
    let limits = Arc::new(Limits::new(4));
    let policy = ScriptedPolicy::new([script("a", "probe-a", "probe-b"), script("b", "probe-b", "probe-a")]);
    let model = Arc::new(ModelService::new(limits.clone(), artifacts.clone(), "iso").with_policy("scripted", Arc::new(policy)));
    let agent = AgentService::new(model, artifacts.clone()).with_round_ms(0);
    let sched = SchedulerConfig { mode_default: ExecutionMode::Ephemeral, ..Default::default() };
    let mut rt = LocalRuntime::build(LocalConfig::default(), sched, limits, Arc::new(MetadataStore::new()));
    let mut plan = RolloutPlan::new(vec![AgentTask::new("a", "local"), AgentTask::new("b", "local")], 1, "scripted");
    plan.run_id = "iso".into();
    let results = agent.run_batch(&mut rt, &plan).unwrap();
    assert_eq!(results.len(), 2);
    for r in &results {
        assert_eq!(r.termination_cause, TerminationCause::Finish, "{r:?}");
        let raw = artifacts.get_artifact(&task_artifact_key("iso", &r.task_id, TRAJECTORY_ARTIFACT)).unwrap();
        let traj = Trajectory::from_jsonl(std::str::from_utf8(&raw).unwrap()).unwrap();
        // State before step k carries the exit status of action k-1.
        let exits: Vec<Option<i32>> = traj.steps.iter().map(|s| s.state.last_exit).collect();
        assert_eq!(exits, vec![None, Some(0), Some(0), Some(0), Some(1)], "{}", r.task_key);
    }
    assert_eq!(rt.control().unfinished(), 0);
}
