// SPDX-License-Identifier: Apache-2.0

//! Virtual-time experiments over the full control plane: throughput and
//! cost versus task count, per-phase latency, startup scaling and resource
//! utilization traces.

mod cost;
mod output;
mod stats;

pub use cost::{cost, CostReport, ProfileCost};
pub use output::{read_instance_csv, read_task_csv, InstanceRow, TaskRow};
pub use stats::{bootstrap_ci, mean, quantile, Interval};

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{utilization_trace, SimConfig, Strategy, UtilizationSample};
use crate::limits::Limits;
use crate::model::{AgentTask, EventKind, ExecutionMode, InstanceDescriptor, TaskRecord, TaskSpec, WorkloadSpec};
use crate::persistence::MetadataStore;
use crate::runtime::{RuntimeError, SimRuntime};
use crate::scheduler::SchedulerConfig;
use crate::sim::derive_seed;
use crate::time::{ms_to_minutes, Millis};

/// Largest centralized batch: the whole high-spec fleet, fully packed.
pub const CENTRALIZED_MAX_TASKS: u32 = 2_000;
pub const BOOTSTRAP_ITERATIONS: usize = 100;
pub const CI_LEVEL: f64 = 0.95;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("{tasks} tasks exceed the centralized fleet limit of {limit}")]
    FleetCapExceeded { tasks: u32, limit: u32 },
    #[error("empty sample")]
    EmptySample,
    #[error("instance {0} has not terminated")]
    NotTerminated(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        ExperimentError::Io(e.to_string())
    }
}

impl From<csv::Error> for ExperimentError {
    fn from(e: csv::Error) -> Self {
        ExperimentError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Throughput,
    LatencyBreakdown,
    Utilization,
    StartupScaling,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Throughput => "throughput",
            ExperimentKind::LatencyBreakdown => "latency_breakdown",
            ExperimentKind::Utilization => "utilization",
            ExperimentKind::StartupScaling => "startup_scaling",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "throughput" => Ok(Self::Throughput),
            "latency_breakdown" | "latency" => Ok(Self::LatencyBreakdown),
            "utilization" => Ok(Self::Utilization),
            "startup_scaling" | "startup" => Ok(Self::StartupScaling),
            other => Err(format!("unknown experiment {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub experiment: ExperimentKind,
    pub strategy: Strategy,
    /// Task counts for throughput, concurrency levels for startup scaling,
    /// the batch size (first entry) for latency, sample count for utilization.
    pub grid: Vec<u32>,
    pub seed: u64,
    pub repetitions: u32,
}

impl ExperimentSpec {
    pub fn new(experiment: ExperimentKind, strategy: Strategy) -> Self {
        let grid = match experiment {
            ExperimentKind::Throughput => match strategy {
                Strategy::Distributed => vec![1, 100, 1_000, 2_000, 10_000],
                Strategy::Centralized => vec![1, 100, 1_000, 2_000],
            },
            ExperimentKind::LatencyBreakdown => vec![1_000],
            ExperimentKind::Utilization => vec![200],
            ExperimentKind::StartupScaling => vec![1, 10, 100, 1_000, 2_000, 10_000],
        };
        Self { experiment, strategy, grid, seed: 0, repetitions: 1 }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.grid.is_empty() {
            return Err(ExperimentError::Invalid("empty grid".into()));
        }
        if self.grid[0] == 0 || self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ExperimentError::Invalid("grid must be positive and strictly increasing".into()));
        }
        if self.repetitions == 0 {
            return Err(ExperimentError::Invalid("repetitions must be positive".into()));
        }
        let sized = matches!(self.experiment, ExperimentKind::Throughput | ExperimentKind::LatencyBreakdown);
        if sized && self.strategy == Strategy::Centralized {
            if let Some(&n) = self.grid.iter().find(|&&n| n > CENTRALIZED_MAX_TASKS) {
                return Err(ExperimentError::FleetCapExceeded { tasks: n, limit: CENTRALIZED_MAX_TASKS });
            }
        }
        Ok(())
    }
}

/// One task's phase timestamps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTiming {
    pub task_id: String,
    pub submitted: Millis,
    pub scheduled: Millis,
    pub env_ready: Millis,
    pub exec_start: Millis,
    pub exec_end: Millis,
    /// When the completion event was published.
    pub completed: Millis,
}

impl TaskTiming {
    pub fn submission_ms(&self) -> Millis {
        self.scheduled - self.submitted
    }
    pub fn startup_ms(&self) -> Millis {
        self.env_ready - self.scheduled
    }
    pub fn dispatch_ms(&self) -> Millis {
        self.exec_start - self.env_ready
    }
    pub fn exec_ms(&self) -> Millis {
        self.exec_end - self.exec_start
    }
    pub fn end_to_end_ms(&self) -> Millis {
        self.exec_end - self.submitted
    }
}

fn timing(rec: &TaskRecord, completed: Millis) -> Result<TaskTiming, ExperimentError> {
    let ts = &rec.phase_timestamps;
    let missing = || ExperimentError::Invalid(format!("task {} has incomplete timestamps", rec.task_id));
    Ok(TaskTiming {
        task_id: rec.task_id.clone(),
        submitted: ts.submitted.ok_or_else(missing)?,
        scheduled: ts.scheduled.ok_or_else(missing)?,
        env_ready: ts.env_ready.ok_or_else(missing)?,
        exec_start: ts.exec_start.ok_or_else(missing)?,
        exec_end: ts.exec_end.ok_or_else(missing)?,
        completed,
    })
}

/// Everything measured in one simulated batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRun {
    pub strategy: Strategy,
    pub mode: ExecutionMode,
    pub tasks: Vec<TaskTiming>,
    pub instances: Vec<InstanceDescriptor>,
    pub cost: CostReport,
    /// First submission to last completion.
    pub makespan_ms: Millis,
    pub event_log: String,
    pub startup_samples: u64,
}

impl BatchRun {
    pub fn makespan_min(&self) -> f64 {
        ms_to_minutes(self.makespan_ms)
    }

    /// Per-task submission-to-completion minutes.
    pub fn completion_minutes(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| ms_to_minutes(t.completed - t.submitted)).collect()
    }

    pub fn phase_means(&self) -> PhaseBreakdown {
        let m = |f: fn(&TaskTiming) -> Millis| mean(&self.tasks.iter().map(|t| ms_to_minutes(f(t))).collect::<Vec<_>>());
        PhaseBreakdown {
            submission_min: m(TaskTiming::submission_ms),
            startup_min: m(TaskTiming::startup_ms),
            scheduling_min: m(TaskTiming::dispatch_ms),
            execution_min: m(TaskTiming::exec_ms),
            total_min: m(TaskTiming::end_to_end_ms),
        }
    }
}

/// How a batch is laid out on the fleet.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSetup {
    pub sim: SimConfig,
    pub mode: ExecutionMode,
    pub pool_max: u32,
    /// Instances provisioned and brought up before the batch is submitted.
    pub prewarm: u32,
}

impl BatchSetup {
    /// The throughput/cost layout: packed persistent pools, grown on
    /// demand from a cold start.
    pub fn throughput(strategy: Strategy, tasks: u32, seed: u64) -> Self {
        let sim = SimConfig::for_strategy(strategy).with_seed(seed);
        let per = sim.profile.max_concurrent_tasks;
        let pool_max = tasks.div_ceil(per).min(sim.fleet_cap);
        Self { sim, mode: ExecutionMode::Persistent, pool_max, prewarm: 0 }
    }
}

/// Submits `tasks` synthetic tasks at t=0 (or once a prewarmed pool is up),
/// runs to completion, drains what is left and bills the fleet.
pub fn run_batch_sim(setup: &BatchSetup, tasks: u32) -> Result<BatchRun, ExperimentError> {
    setup.sim.validate().map_err(ExperimentError::Invalid)?;
    let sched = SchedulerConfig {
        retry_max: 3,
        pool_max: setup.pool_max,
        mode_default: setup.mode,
        profile: setup.sim.profile.clone(),
        quota_estimate_hours: setup.sim.exec.mean_min / 60.0,
    };
    let limits = Arc::new(Limits::new(setup.sim.fleet_slots().min(u32::MAX as u64) as u32));
    let mut rt = SimRuntime::build(setup.sim.clone(), sched, limits, Arc::new(MetadataStore::new()));
    if setup.prewarm > 0 {
        rt.prewarm(setup.prewarm);
        rt.run_until_idle()?;
    }
    let t0 = rt.now();
    let mut ids = Vec::with_capacity(tasks as usize);
    for i in 0..tasks {
        let spec = TaskSpec::new(AgentTask::new(format!("synthetic-{i}"), "bench"))
            .mode(setup.mode)
            .workload(WorkloadSpec::Synthetic);
        ids.push(rt.submit_at(spec, t0).map_err(RuntimeError::from)?);
    }
    rt.run_until_idle()?;
    rt.drain()?;

    let bus = rt.control().bus().clone();
    let mut completed: BTreeMap<String, Millis> = BTreeMap::new();
    for ev in bus.replay(1).map_err(|e| ExperimentError::Invalid(e.to_string()))? {
        if ev.kind == EventKind::TaskCompleted {
            completed.entry(ev.subject_id.clone()).or_insert(ev.timestamp);
        }
    }
    let mut timings = Vec::with_capacity(ids.len());
    for id in &ids {
        let rec = rt.control().task(id).ok_or_else(|| ExperimentError::Invalid(format!("lost task {id}")))?;
        let done = *completed.get(id).ok_or_else(|| ExperimentError::Invalid(format!("task {id} never completed")))?;
        timings.push(timing(rec, done)?);
    }
    let instances: Vec<InstanceDescriptor> = rt.control().instances().cloned().collect();
    let cost = cost(&instances)?;
    let makespan_ms = timings.iter().map(|t| t.completed).max().unwrap_or(t0) - t0;
    Ok(BatchRun {
        strategy: setup.sim.strategy,
        mode: setup.mode,
        tasks: timings,
        instances,
        cost,
        makespan_ms,
        event_log: bus.to_jsonl(),
        startup_samples: rt.backend().startup_log().len() as u64,
    })
}

pub fn run_throughput(strategy: Strategy, tasks: u32, seed: u64) -> Result<BatchRun, ExperimentError> {
    if strategy == Strategy::Centralized && tasks > CENTRALIZED_MAX_TASKS {
        return Err(ExperimentError::FleetCapExceeded { tasks, limit: CENTRALIZED_MAX_TASKS });
    }
    run_batch_sim(&BatchSetup::throughput(strategy, tasks, seed), tasks)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseBreakdown {
    pub submission_min: f64,
    pub startup_min: f64,
    pub scheduling_min: f64,
    pub execution_min: f64,
    pub total_min: f64,
}

/// The three configurations compared in the latency breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyConfig {
    /// Distributed, tasks placed on an already running pool.
    Persistent,
    /// Distributed, one fresh instance per task.
    Ephemeral,
    /// Packed high-spec machines from a cold start.
    Centralized,
}

impl LatencyConfig {
    pub const ALL: [LatencyConfig; 3] = [LatencyConfig::Persistent, LatencyConfig::Ephemeral, LatencyConfig::Centralized];

    pub fn as_str(self) -> &'static str {
        match self {
            LatencyConfig::Persistent => "persistent",
            LatencyConfig::Ephemeral => "ephemeral",
            LatencyConfig::Centralized => "centralized",
        }
    }

    pub fn setup(self, tasks: u32, seed: u64) -> BatchSetup {
        match self {
            LatencyConfig::Persistent => {
                let sim = SimConfig::distributed().with_seed(seed);
                BatchSetup { sim, mode: ExecutionMode::Persistent, pool_max: tasks, prewarm: tasks }
            }
            LatencyConfig::Ephemeral => {
                let sim = SimConfig::distributed().with_seed(seed);
                BatchSetup { sim, mode: ExecutionMode::Ephemeral, pool_max: 0, prewarm: 0 }
            }
            LatencyConfig::Centralized => BatchSetup::throughput(Strategy::Centralized, tasks, seed),
        }
    }
}

pub fn latency_breakdown(config: LatencyConfig, tasks: u32, seed: u64) -> Result<(PhaseBreakdown, BatchRun), ExperimentError> {
    if config == LatencyConfig::Centralized && tasks > CENTRALIZED_MAX_TASKS {
        return Err(ExperimentError::FleetCapExceeded { tasks, limit: CENTRALIZED_MAX_TASKS });
    }
    let run = run_batch_sim(&config.setup(tasks, seed), tasks)?;
    Ok((run.phase_means(), run))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartupRow {
    pub concurrency: u32,
    pub centralized_min: f64,
    pub ephemeral_min: f64,
    pub persistent_min: f64,
}

pub fn startup_scaling(levels: &[u32], sim: &crate::env::LinearStartup) -> Vec<StartupRow> {
    use crate::env::StartupModel;
    levels
        .iter()
        .map(|&c| StartupRow {
            concurrency: c,
            centralized_min: sim.startup_minutes(Strategy::Centralized, ExecutionMode::Persistent, c),
            ephemeral_min: sim.startup_minutes(Strategy::Distributed, ExecutionMode::Ephemeral, c),
            persistent_min: sim.startup_minutes(Strategy::Distributed, ExecutionMode::Persistent, c),
        })
        .collect()
}

/// One grid point of a throughput experiment, over all repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub tasks: u32,
    pub makespan_min: f64,
    pub cost_usd: f64,
    pub instance_hours: f64,
    pub completion: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub config: LatencyConfig,
    pub tasks: u32,
    pub phases: PhaseBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum Summary {
    Throughput { strategy: Strategy, rows: Vec<ThroughputRow> },
    LatencyBreakdown { rows: Vec<LatencyRow> },
    Utilization { strategy: Strategy, cpu_peak: f64, cpu_peak_t: f64, mem_peak: f64, mem_peak_t: f64, mem_mean: f64 },
    StartupScaling { rows: Vec<StartupRow> },
}

/// Files written plus the headline numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub summary: Summary,
    pub files: Vec<PathBuf>,
    /// Simulated time summed over every batch the experiment ran.
    #[serde(default)]
    pub virtual_ms: Millis,
}

pub const SUMMARY_FILE: &str = "summary.json";

fn rep_seed(seed: u64, rep: u32) -> u64 {
    if rep == 0 {
        seed
    } else {
        derive_seed(seed, &["rep", &rep.to_string()])
    }
}

/// Runs `spec` and writes CSV/JSON outputs under `out_dir`.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: &Path) -> Result<ExperimentReport, ExperimentError> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let mut virtual_ms: Millis = 0;
    let summary = match spec.experiment {
        ExperimentKind::Throughput => {
            let mut rows = Vec::new();
            for &n in &spec.grid {
                let mut makespans = Vec::new();
                let mut costs = Vec::new();
                let mut hours = Vec::new();
                let mut completions = Vec::new();
                for rep in 0..spec.repetitions {
                    let run = run_throughput(spec.strategy, n, rep_seed(spec.seed, rep))?;
                    let stem = format!("{}_n{n}_r{rep}", spec.strategy);
                    files.push(output::write_task_csv(&out_dir.join(format!("tasks_{stem}.csv")), &run.tasks)?);
                    files.push(output::write_instance_csv(&out_dir.join(format!("instances_{stem}.csv")), &run.instances)?);
                    let events = out_dir.join(format!("events_{stem}.jsonl"));
                    std::fs::write(&events, &run.event_log)?;
                    files.push(events);
                    virtual_ms += run.makespan_ms;
                    makespans.push(run.makespan_min());
                    costs.push(run.cost.total_usd);
                    hours.push(run.cost.instance_hours);
                    completions.extend(run.completion_minutes());
                }
                rows.push(ThroughputRow {
                    tasks: n,
                    makespan_min: mean(&makespans),
                    cost_usd: mean(&costs),
                    instance_hours: mean(&hours),
                    completion: bootstrap_ci(&completions, BOOTSTRAP_ITERATIONS, CI_LEVEL, spec.seed)?,
                });
            }
            files.push(output::write_throughput_csv(&out_dir.join(format!("throughput_{}.csv", spec.strategy)), &rows)?);
            Summary::Throughput { strategy: spec.strategy, rows }
        }
        ExperimentKind::LatencyBreakdown => {
            let n = spec.grid[0];
            let mut rows = Vec::new();
            for config in LatencyConfig::ALL {
                let (phases, run) = latency_breakdown(config, n, spec.seed)?;
                virtual_ms += run.makespan_ms;
                files.push(output::write_task_csv(&out_dir.join(format!("tasks_latency_{}.csv", config.as_str())), &run.tasks)?);
                rows.push(LatencyRow { config, tasks: n, phases });
            }
            files.push(output::write_latency_csv(&out_dir.join("latency_breakdown.csv"), &rows)?);
            Summary::LatencyBreakdown { rows }
        }
        ExperimentKind::Utilization => {
            let trace = utilization_trace(spec.strategy, spec.grid[0] as usize, spec.seed);
            files.push(output::write_utilization_csv(&out_dir.join(format!("utilization_{}.csv", spec.strategy)), &trace)?);
            utilization_summary(spec.strategy, &trace)
        }
        ExperimentKind::StartupScaling => {
            let rows = startup_scaling(&spec.grid, &SimConfig::for_strategy(spec.strategy).startup);
            files.push(output::write_startup_csv(&out_dir.join("startup_scaling.csv"), &rows)?);
            Summary::StartupScaling { rows }
        }
    };
    let report = ExperimentReport { spec: spec.clone(), summary, files, virtual_ms };
    let path = out_dir.join(SUMMARY_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&report).map_err(|e| ExperimentError::Io(e.to_string()))?)?;
    Ok(report)
}

pub fn utilization_summary(strategy: Strategy, trace: &[UtilizationSample]) -> Summary {
    let peak = |f: fn(&UtilizationSample) -> f64| {
        trace.iter().fold((f64::MIN, 0.0), |best, s| if f(s) > best.0 { (f(s), s.t_norm) } else { best })
    };
    let (cpu_peak, cpu_peak_t) = peak(|s| s.cpu_pct);
    let (mem_peak, mem_peak_t) = peak(|s| s.mem_pct);
    let mem_mean = mean(&trace.iter().map(|s| s.mem_pct).collect::<Vec<_>>());
    Summary::Utilization { strategy, cpu_peak, cpu_peak_t, mem_peak, mem_peak_t, mem_mean }
}

/// Reads back a summary written by [`run_experiment`].
pub fn load_report(dir: &Path) -> Result<ExperimentReport, ExperimentError> {
    let bytes = std::fs::read(dir.join(SUMMARY_FILE))?;
    serde_json::from_slice(&bytes).map_err(|e| ExperimentError::Io(e.to_string()))
}

/// Human-readable rendering of a summary.
pub fn render_summary(summary: &Summary) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    match summary {
        Summary::Throughput { strategy, rows } => {
            let _ = writeln!(s, "throughput ({strategy})");
            let _ = writeln!(s, "{:>8} {:>12} {:>10} {:>22}", "tasks", "makespan", "cost_usd", "completion 95% CI");
            for r in rows {
                let _ = writeln!(
                    s,
                    "{:>8} {:>10.2}m {:>10.2} {:>8.2} [{:.2}, {:.2}]",
                    r.tasks, r.makespan_min, r.cost_usd, r.completion.mean, r.completion.lo, r.completion.hi
                );
            }
        }
        Summary::LatencyBreakdown { rows } => {
            let _ = writeln!(s, "{:<12} {:>10} {:>8} {:>10} {:>9} {:>7}", "config", "submission", "startup", "scheduling", "execution", "total");
            for r in rows {
                let p = &r.phases;
                let _ = writeln!(
                    s,
                    "{:<12} {:>10.2} {:>8.2} {:>10.2} {:>9.2} {:>7.2}",
                    r.config.as_str(),
                    p.submission_min,
                    p.startup_min,
                    p.scheduling_min,
                    p.execution_min,
                    p.total_min
                );
            }
        }
        Summary::Utilization { strategy, cpu_peak, cpu_peak_t, mem_peak, mem_peak_t, mem_mean } => {
            let _ = writeln!(
                s,
                "utilization ({strategy}): cpu peak {cpu_peak:.1}% at t={cpu_peak_t:.2}, mem peak {mem_peak:.1}% at t={mem_peak_t:.2}, mem mean {mem_mean:.1}%"
            );
        }
        Summary::StartupScaling { rows } => {
            let _ = writeln!(s, "{:>8} {:>12} {:>10} {:>11}", "c", "centralized", "ephemeral", "persistent");
            for r in rows {
                let _ = writeln!(s, "{:>8} {:>12.3} {:>10.3} {:>11.3}", r.concurrency, r.centralized_min, r.ephemeral_min, r.persistent_min);
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        let mut s = ExperimentSpec::new(ExperimentKind::Throughput, Strategy::Centralized);
        s.validate().unwrap();
        s.grid.push(2_001);
        assert!(matches!(s.validate(), Err(ExperimentError::FleetCapExceeded { tasks: 2_001, .. })));
        s.grid = vec![10, 10];
        assert!(s.validate().is_err());
        assert!(matches!(run_throughput(Strategy::Centralized, 2_001, 0), Err(ExperimentError::FleetCapExceeded { .. })));
    }

    #[test]
    fn single_task_is_pipeline_sum() {
        let run = run_throughput(Strategy::Distributed, 1, 0).unwrap();
        let c = SimConfig::distributed();
        let t = &run.tasks[0];
        let expect = c.ingest_min + c.boot_min + c.startup.persistent_min + c.dispatch_min + ms_to_minutes(t.exec_ms()) + c.collect_min;
        assert!((run.makespan_min() - expect).abs() < 1e-3, "{} vs {expect}", run.makespan_min());
    }

    #[test]
    fn phases_sum_exactly() {
        let (_, run) = latency_breakdown(LatencyConfig::Ephemeral, 20, 1).unwrap();
        for t in &run.tasks {
            assert_eq!(t.submission_ms() + t.startup_ms() + t.dispatch_ms() + t.exec_ms(), t.end_to_end_ms());
        }
    }
}
