// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fleetflow::agent::{aggregate_metrics, filter_environments, AgentService, PassRateTable, RolloutPlan};
use fleetflow::env::SimConfig;
use fleetflow::limits::Limits;
use fleetflow::model::{AgentTask, ExecutionMode, TerminationCause};
use fleetflow::persistence::{ArtifactStore, MetadataStore};
use fleetflow::policy::{ConstantPolicy, ModelService, RandomPolicy};
use fleetflow::runtime::SimRuntime;
use fleetflow::scheduler::SchedulerConfig;

fn rig(capacity: u32) -> (SimRuntime, AgentService) {
    let artifacts = Arc::new(ArtifactStore::in_memory());
    let limits = Arc::new(Limits::new(capacity));
    let model = ModelService::new(limits.clone(), artifacts.clone(), "fanout")
        .with_policy("never", Arc::new(ConstantPolicy::never_finish()))
        .with_policy("random", Arc::new(RandomPolicy::default()));
    let rt = SimRuntime::build(SimConfig::distributed().with_seed(5), SchedulerConfig::default(), limits, Arc::new(MetadataStore::new()));
    (rt, AgentService::new(Arc::new(model), artifacts))
}

fn tasks(k: usize) -> Vec<AgentTask> {
    (0..k).map(|i| AgentTask::new(format!("task-{i:02}"), "python:3.11")).collect()
}

#[test]
fn fan_out_64_by_16_with_never_finishing_policy() {
    let (mut rt, agent) = rig(1_024);
    let plan = RolloutPlan { mode: ExecutionMode::Ephemeral, ..RolloutPlan::new(tasks(64), 16, "never") };
    assert_eq!(plan.parallelism(), 1_024);
    let results = agent.run_batch(&mut rt, &plan).unwrap();
    assert_eq!(results.len(), 1_024);
    let mut per_task: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
    for r in &results {
        per_task.entry(r.task_key.as_str()).or_default().insert(r.replica_index);
        assert_eq!((r.rounds, r.termination_cause, r.reward), (100, TerminationCause::StepLimit, -0.5), "{r:?}");
    }
    assert_eq!(per_task.len(), 64);
    assert!(per_task.values().all(|reps| *reps == (0..16).collect()));
    // Replica seeds are distinct within a task.
    let seeds: BTreeSet<(String, u64)> = results.iter().map(|r| (r.task_key.clone(), r.seed)).collect();
    assert_eq!(seeds.len(), 1_024);
    let m = aggregate_metrics(&results).unwrap();
    assert_eq!(m.results, 1_024);
    assert_eq!(m.mean_reward, -0.5);
}

#[test]
fn fan_out_under_limited_capacity_still_completes() {
    let (mut rt, agent) = rig(48);
    let plan = RolloutPlan::new(tasks(8), 16, "random");
    let results = agent.run_batch(&mut rt, &plan).unwrap();
    assert_eq!(results.len(), 128);
    assert!(rt.control().stats().max_executing <= 48);
    let m = aggregate_metrics(&results).unwrap();
    assert_eq!(m.per_task.len(), 8);
    assert!(m.per_task.values().all(|t| t.replicas == 16));
}

/// A table of `size` tasks with exactly `planted` rates strictly inside (0, 1);
/// the rest sit on the boundaries.
fn planted_table(size: usize, planted: usize, seed: u64) -> (PassRateTable, BTreeSet<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys: Vec<String> = (0..size).map(|i| format!("env-{i:05}")).collect();
    keys.shuffle(&mut rng);
    let mut rates = BTreeMap::new();
    let mut expected = BTreeSet::new();
    for (i, k) in keys.into_iter().enumerate() {
        let rate = if i < planted {
            expected.insert(k.clone());
            // Includes values one ulp away from the boundaries.
            match rng.random_range(0..4) {
                0 => f64::MIN_POSITIVE,
                1 => 1.0 - f64::EPSILON,
                _ => rng.random_range(1..16) as f64 / 16.0,
            }
        } else if rng.random_bool(0.5) {
            0.0
        } else {
            1.0
        };
        rates.insert(k, rate);
    }
    (PassRateTable::new(rates).unwrap(), expected)
}

#[test]
fn filtering_retains_exactly_the_planted_counts() {
    for (size, planted) in [(2_438, 1_219), (21_336, 6_390), (4_723, 924), (30_274, 15_017)] {
        let (table, expected) = planted_table(size, planted, size as u64);
        assert_eq!(table.len(), size);
        let kept = filter_environments(&table);
        assert_eq!(kept.len(), planted);
        assert_eq!(kept, expected);
    }
}
