// SPDX-License-Identifier: Apache-2.0

//! The discrete-event stack against a deliberately naive model of the same
//! ephemeral pipeline: no heap, no bus, just a scan for the next instant.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fleetflow::env::{SimConfig, Strategy};
use fleetflow::limits::Limits;
use fleetflow::model::{AgentTask, EventKind, ExecutionMode, TaskSpec, WorkloadSpec};
use fleetflow::persistence::MetadataStore;
use fleetflow::runtime::SimRuntime;
use fleetflow::scheduler::SchedulerConfig;

#[derive(Debug, Clone)]
struct Scenario {
    strategy: Strategy,
    capacity: usize,
    ingest_min: f64,
    boot_min: f64,
    dispatch_min: f64,
    collect_min: f64,
    t1: f64,
    slope: f64,
    saturation: u32,
    /// (submission minute, duration ms)
    tasks: Vec<(u64, u64)>,
}

fn scenario(rng: &mut ChaCha8Rng) -> Scenario {
    let n = rng.random_range(1..=24);
    // Whole-minute submissions and delays make coincident instants common.
    let tasks = (0..n).map(|_| (rng.random_range(0..20), rng.random_range(1..=30) * 60_000 + rng.random_range(0..3) * 500)).collect();
    Scenario {
        strategy: if rng.random_bool(0.5) { Strategy::Distributed } else { Strategy::Centralized },
        capacity: rng.random_range(1..=6),
        ingest_min: rng.random_range(0..=3) as f64,
        boot_min: rng.random_range(1..=10) as f64,
        dispatch_min: rng.random_range(0..=2) as f64 * 0.5,
        collect_min: rng.random_range(1..=5) as f64,
        t1: rng.random_range(1..=3) as f64,
        slope: rng.random_range(0..=4) as f64 * 0.25,
        saturation: rng.random_range(1..=8),
        tasks,
    }
}

fn ms(min: f64) -> u64 {
    (min * 60_000.0).round() as u64
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Times {
    scheduled: u64,
    env_ready: u64,
    exec_start: u64,
    exec_end: u64,
    completed: u64,
}

/// Straight-line model: every task carries its pending timestamps and each
/// iteration scans all of them for the earliest one.
fn reference(s: &Scenario) -> Vec<Times> {
    let n = s.tasks.len();
    let arrival: Vec<u64> = s.tasks.iter().map(|t| t.0 * 60_000 + ms(s.ingest_min)).collect();
    let mut boot_done: Vec<Option<u64>> = vec![None; n];
    let mut startup_done: Vec<Option<u64>> = vec![None; n];
    let mut out = vec![Times::default(); n];
    let mut exec_start: Vec<Option<u64>> = vec![None; n];
    let mut exec_end: Vec<Option<u64>> = vec![None; n];
    let mut collected: Vec<Option<u64>> = vec![None; n];
    let mut arrived = vec![false; n];
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut free = s.capacity;
    let mut startups_in_flight = 0u32;
    let startup = |c: u32| {
        let extra = (c.clamp(1, s.saturation) - 1) as f64;
        s.t1 + s.slope * extra
    };
    loop {
        let mut t = u64::MAX;
        for i in 0..n {
            if !arrived[i] {
                t = t.min(arrival[i]);
            }
            for v in [boot_done[i], startup_done[i], exec_start[i], exec_end[i], collected[i]].into_iter().flatten() {
                t = t.min(v);
            }
        }
        if t == u64::MAX {
            break;
        }
        for i in 0..n {
            if collected[i] == Some(t) {
                collected[i] = None;
                out[i].completed = t;
                free += 1;
            }
            if exec_end[i] == Some(t) {
                exec_end[i] = None;
                out[i].exec_end = t;
                collected[i] = Some(t + ms(s.collect_min));
            }
            if exec_start[i] == Some(t) {
                exec_start[i] = None;
                out[i].exec_start = t;
                exec_end[i] = Some(t + s.tasks[i].1);
            }
            if startup_done[i] == Some(t) {
                startup_done[i] = None;
                startups_in_flight -= 1;
                out[i].env_ready = t;
                exec_start[i] = Some(t + ms(s.dispatch_min));
            }
        }
        let mut batch = Vec::new();
        for i in 0..n {
            if boot_done[i] == Some(t) {
                boot_done[i] = None;
                batch.push(i);
            }
        }
        for i in 0..n {
            if !arrived[i] && arrival[i] == t {
                arrived[i] = true;
                queue.push_back(i);
            }
        }
        while free > 0 {
            let Some(i) = queue.pop_front() else { break };
            free -= 1;
            out[i].scheduled = t;
            boot_done[i] = Some(t + ms(s.boot_min));
        }
        let c = startups_in_flight + batch.len() as u32;
        for i in batch {
            startups_in_flight += 1;
            startup_done[i] = Some(t + ms(startup(c)));
        }
    }
    out
}

fn engine(s: &Scenario) -> Vec<Times> {
    let mut sim = SimConfig::for_strategy(s.strategy).with_seed(1);
    sim.fleet_cap = 10_000;
    sim.ingest_min = s.ingest_min;
    sim.boot_min = s.boot_min;
    sim.dispatch_min = s.dispatch_min;
    sim.collect_min = s.collect_min;
    sim.startup.ephemeral_t1 = s.t1;
    sim.startup.centralized_t1 = s.t1;
    sim.startup.ephemeral_slope = s.slope;
    sim.startup.centralized_slope = s.slope;
    sim.startup.saturation_c = s.saturation;
    let sched = SchedulerConfig { mode_default: ExecutionMode::Ephemeral, pool_max: 0, ..Default::default() };
    let limits = Arc::new(Limits::new(s.capacity as u32));
    let mut rt = SimRuntime::build(sim, sched, limits, Arc::new(MetadataStore::new()));
    let ids: Vec<String> = s
        .tasks
        .iter()
        .enumerate()
        .map(|(i, &(at_min, dur))| {
            let spec = TaskSpec::new(AgentTask::new(format!("k{i}"), "img"))
                .mode(ExecutionMode::Ephemeral)
                .workload(WorkloadSpec::Fixed { duration_ms: dur });
            rt.submit_at(spec, at_min * 60_000).unwrap()
        })
        .collect();
    rt.run_until_idle().unwrap();
    let completed: BTreeMap<String, u64> = rt
        .control()
        .bus()
        .replay(1)
        .unwrap()
        .into_iter()
        .filter(|e| e.kind == EventKind::TaskCompleted)
        .map(|e| (e.subject_id, e.timestamp))
        .collect();
    ids.iter()
        .map(|id| {
            let ts = &rt.control().task(id).unwrap().phase_timestamps;
            Times {
                scheduled: ts.scheduled.unwrap(),
                env_ready: ts.env_ready.unwrap(),
                exec_start: ts.exec_start.unwrap(),
                exec_end: ts.exec_end.unwrap(),
                completed: completed[id],
            }
        })
        .collect()
}

/// Panics with the scenario on the first mismatch.
pub fn check_scenario(seed: u64) {
    let s = scenario(&mut ChaCha8Rng::seed_from_u64(seed));
    let (want, got) = (reference(&s), engine(&s));
    assert_eq!(got, want, "scenario seed {seed}: {s:?}");
}
