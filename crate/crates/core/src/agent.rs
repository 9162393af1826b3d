// SPDX-License-Identifier: Apache-2.0

//! Agent service: the interaction loop, replica fan-out through the
//! scheduler, metric aggregation and pass-rate filtering.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvHandle, ProgramContext, ProgramOutcome, Progress, TaskProgram};
use crate::model::{
    append_step, finalize_trajectory, validate_dataset, Action, ActionKind, AgentTask, ExecutionMode, ExperienceBatch,
    ModelError, State, TaskRecord, TaskSpec, TaskStatus, TerminationCause, Trajectory, WorkloadSpec,
};
use crate::persistence::{task_artifact_key, ArtifactStore, StoreError, RESULT_ARTIFACT, TRAJECTORY_ARTIFACT};
use crate::policy::{ModelService, ParamsVersion, PolicyContext, PolicyError, Selection};
use crate::runtime::Driver;
use crate::scheduler::{ControlError, ProgramFactory};
use crate::sim::derive_seed;
use crate::time::Millis;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("no results to aggregate")]
    EmptyResultSet,
    #[error("pass rate for {0} outside [0, 1]")]
    InvalidRate(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Outcome of one replica of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub task_id: String,
    pub task_key: String,
    pub replica_index: u32,
    pub seed: u64,
    /// Absent only when no attempt got far enough to persist anything.
    pub trajectory_ref: Option<String>,
    pub reward: f64,
    pub rounds: u32,
    pub termination_cause: TerminationCause,
    pub wall_duration_ms: Millis,
    #[serde(default)]
    pub error: Option<String>,
}

impl RolloutResult {
    pub fn passed(&self) -> bool {
        self.reward > 0.0
    }
}

/// k tasks × n replicas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutPlan {
    pub tasks: Vec<AgentTask>,
    pub replicas: u32,
    pub mode: ExecutionMode,
    pub policy_id: String,
    pub run_id: String,
    pub master_seed: u64,
    pub owner: String,
}

impl RolloutPlan {
    pub fn new(tasks: Vec<AgentTask>, replicas: u32, policy_id: impl Into<String>) -> Self {
        Self {
            tasks,
            replicas,
            mode: ExecutionMode::Ephemeral,
            policy_id: policy_id.into(),
            run_id: "run".into(),
            master_seed: 0,
            owner: "default".into(),
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if self.tasks.is_empty() {
            return Err(AgentError::InvalidPlan("no tasks".into()));
        }
        if self.replicas == 0 {
            return Err(AgentError::InvalidPlan("zero replicas".into()));
        }
        validate_dataset(&self.tasks)?;
        Ok(())
    }

    pub fn parallelism(&self) -> usize {
        self.tasks.len() * self.replicas as usize
    }

    pub fn replica_seed(&self, task_key: &str, replica: u32) -> u64 {
        derive_seed(self.master_seed, &[task_key, &replica.to_string()])
    }
}

/// One rollout as a resumable program: infer, append, step, until finish,
/// the step limit, or an environment failure.
pub struct RolloutProgram {
    task: AgentTask,
    policy_id: String,
    owner: String,
    run_id: String,
    replica_index: u32,
    seed: u64,
    round_ms: Millis,
    model: Arc<ModelService>,
    artifacts: Arc<ArtifactStore>,
    rng: ChaCha8Rng,
    handle: Option<EnvHandle>,
    state: Option<State>,
    traj: Trajectory,
    pending: Option<Action>,
    note: Option<String>,
    started_at: Option<Millis>,
}

impl RolloutProgram {
    pub fn new(
        task: AgentTask,
        rec: &TaskRecord,
        model: Arc<ModelService>,
        artifacts: Arc<ArtifactStore>,
        round_ms: Millis,
    ) -> Result<Self, String> {
        let WorkloadSpec::Rollout { policy_id, run_id, replica_index, seed } = &rec.spec.workload else {
            return Err(format!("task {} is not a rollout", rec.task_id));
        };
        model.policy(policy_id).map_err(|e| e.to_string())?;
        Ok(Self {
            task,
            policy_id: policy_id.clone(),
            owner: rec.spec.owner.clone(),
            run_id: run_id.clone(),
            replica_index: *replica_index,
            seed: *seed,
            round_ms,
            model,
            artifacts,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(*seed, &["select"])),
            handle: None,
            state: None,
            traj: Trajectory::new(),
            pending: None,
            note: None,
            started_at: None,
        })
    }

    fn finalize(&mut self, cause: TerminationCause) {
        let traj = std::mem::take(&mut self.traj);
        self.traj = match finalize_trajectory(traj.clone(), &self.task.goal, cause) {
            Ok(t) => t,
            Err(e) => {
                // a finish step already closed it under another cause
                log::error!("finalizing {}: {e}", self.task.task_key);
                traj
            }
        };
    }

    fn round(&mut self, ctx: &mut ProgramContext<'_>) -> Option<Millis> {
        let action = match self.pending.take() {
            Some(a) => a,
            None => {
                let pctx = PolicyContext {
                    task: &self.task,
                    trajectory: &self.traj,
                    params_version: self.model.params().version,
                    seed: self.seed,
                };
                match self.model.infer(&self.policy_id, &self.owner, &pctx, ctx.now) {
                    Ok(inf) => {
                        let a = match self.model.policy(&self.policy_id).map(|p| p.selection()) {
                            Ok(Selection::Sample) => inf.distribution.sample(&mut self.rng).clone(),
                            _ => inf.distribution.argmax().clone(),
                        };
                        if inf.latency_ms > 0 {
                            self.pending = Some(a);
                            return Some(inf.latency_ms);
                        }
                        a
                    }
                    Err(PolicyError::RateLimited(retry)) => return Some(retry.max(1)),
                    Err(e) => {
                        self.note = Some(e.to_string());
                        self.finalize(TerminationCause::EnvironmentFailure);
                        return None;
                    }
                }
            }
        };
        let state = self.state.take().expect("state after open");
        let traj = std::mem::take(&mut self.traj);
        self.traj = match append_step(traj.clone(), state.clone(), action.clone(), &self.task) {
            Ok(t) => t,
            Err(e) => {
                self.traj = traj;
                self.note = Some(e.to_string());
                self.finalize(TerminationCause::EnvironmentFailure);
                return None;
            }
        };
        if action.kind == ActionKind::Finish {
            self.finalize(TerminationCause::Finish);
            return None;
        }
        let handle = self.handle.expect("open env");
        match ctx.env.env_step(handle, &action) {
            Ok(sr) => self.state = Some(sr.state),
            Err(e) => {
                self.note = Some(e.to_string());
                self.finalize(TerminationCause::EnvironmentFailure);
                return None;
            }
        }
        if self.traj.len() >= self.task.max_steps as usize {
            self.finalize(TerminationCause::StepLimit);
            return None;
        }
        Some(self.round_ms)
    }

    fn persist(&mut self, ctx: &ProgramContext<'_>) -> Result<String, StoreError> {
        let traj_key = task_artifact_key(&self.run_id, ctx.task_id, TRAJECTORY_ARTIFACT);
        put_once(&self.artifacts, &traj_key, self.traj.to_jsonl().as_bytes())?;
        let result = RolloutResult {
            task_id: ctx.task_id.to_string(),
            task_key: self.task.task_key.clone(),
            replica_index: self.replica_index,
            seed: self.seed,
            trajectory_ref: Some(traj_key),
            reward: self.traj.reward.unwrap_or(self.task.goal.non_termination_penalty),
            rounds: self.traj.len() as u32,
            termination_cause: self.traj.termination_cause.unwrap_or(TerminationCause::EnvironmentFailure),
            wall_duration_ms: ctx.now - self.started_at.unwrap_or(ctx.now),
            error: self.note.clone(),
        };
        let key = task_artifact_key(&self.run_id, ctx.task_id, RESULT_ARTIFACT);
        let body = serde_json::to_vec_pretty(&result).map_err(|e| StoreError::Serde(e.to_string()))?;
        put_once(&self.artifacts, &key, &body)?;
        Ok(key)
    }
}

/// Artifacts are write-once; a retried attempt may find its own earlier
/// output already there, which is not an error.
fn put_once(store: &ArtifactStore, key: &str, bytes: &[u8]) -> Result<(), StoreError> {
    match store.put_artifact(key, bytes) {
        Ok(_) | Err(StoreError::KeyExists(_)) => Ok(()),
        Err(e) => Err(e),
    }
}

impl TaskProgram for RolloutProgram {
    fn advance(&mut self, ctx: &mut ProgramContext<'_>) -> Progress {
        self.started_at.get_or_insert(ctx.now);
        if self.handle.is_none() {
            match ctx.env.open_env(ctx.instance_id, &self.task.env_spec) {
                Ok((h, s)) => {
                    self.handle = Some(h);
                    self.state = Some(s);
                }
                Err(e) => {
                    return Progress::Done(ProgramOutcome { result_ref: None, failure: Some(format!("open env: {e}")) })
                }
            }
        }
        if !self.traj.is_finalized() {
            if let Some(wait) = self.round(ctx) {
                return Progress::Continue(wait);
            }
        }
        if let Some(h) = self.handle {
            let _ = ctx.env.close_env(h);
        }
        match self.persist(ctx) {
            Ok(key) => Progress::Done(ProgramOutcome { result_ref: Some(key), failure: None }),
            Err(e) => Progress::Done(ProgramOutcome { result_ref: None, failure: Some(format!("persist: {e}")) }),
        }
    }
}

struct Factory {
    model: Arc<ModelService>,
    artifacts: Arc<ArtifactStore>,
    round_ms: Millis,
}

impl ProgramFactory for Factory {
    fn build(&self, rec: &TaskRecord) -> Result<Box<dyn TaskProgram>, String> {
        let p = RolloutProgram::new(rec.spec.task.clone(), rec, self.model.clone(), self.artifacts.clone(), self.round_ms)?;
        Ok(Box::new(p))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub replicas: u32,
    pub passes: u32,
    pub pass_rate: f64,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub results: usize,
    pub mean_reward: f64,
    pub mean_rounds: f64,
    pub causes: BTreeMap<String, u64>,
    pub per_task: BTreeMap<String, TaskMetrics>,
}

impl Metrics {
    pub fn pass_rates(&self) -> PassRateTable {
        PassRateTable(self.per_task.iter().map(|(k, m)| (k.clone(), m.pass_rate)).collect())
    }
}

/// Pass rate per task key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PassRateTable(BTreeMap<String, f64>);

impl PassRateTable {
    pub fn new(rates: BTreeMap<String, f64>) -> Result<Self, AgentError> {
        if let Some((k, _)) = rates.iter().find(|(_, r)| !(0.0..=1.0).contains(*r)) {
            return Err(AgentError::InvalidRate(k.clone()));
        }
        Ok(Self(rates))
    }

    pub fn rates(&self) -> &BTreeMap<String, f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn aggregate_metrics(results: &[RolloutResult]) -> Result<Metrics, AgentError> {
    if results.is_empty() {
        return Err(AgentError::EmptyResultSet);
    }
    let n = results.len() as f64;
    let mut causes = BTreeMap::new();
    let mut per_task: BTreeMap<String, (u32, u32, f64)> = BTreeMap::new();
    for r in results {
        *causes.entry(r.termination_cause.as_str().to_string()).or_insert(0) += 1;
        let e = per_task.entry(r.task_key.clone()).or_default();
        e.0 += 1;
        e.1 += r.passed() as u32;
        e.2 += r.reward;
    }
    Ok(Metrics {
        results: results.len(),
        mean_reward: results.iter().map(|r| r.reward).sum::<f64>() / n,
        mean_rounds: results.iter().map(|r| r.rounds as f64).sum::<f64>() / n,
        causes,
        per_task: per_task
            .into_iter()
            .map(|(k, (replicas, passes, sum))| {
                let m = TaskMetrics {
                    replicas,
                    passes,
                    pass_rate: passes as f64 / replicas as f64,
                    mean_reward: sum / replicas as f64,
                };
                (k, m)
            })
            .collect(),
    })
}

/// Keeps tasks that are neither always solved nor never solved.
pub fn filter_environments(table: &PassRateTable) -> BTreeSet<String> {
    table.0.iter().filter(|(_, r)| **r > 0.0 && **r < 1.0).map(|(k, _)| k.clone()).collect()
}

/// One `AgentTask` JSON object per line.
pub fn load_dataset(path: &Path) -> Result<Vec<AgentTask>, AgentError> {
    let text = std::fs::read_to_string(path).map_err(|e| StoreError::Io(format!("{}: {e}", path.display())))?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<Vec<AgentTask>, AgentError> {
    let tasks: Vec<AgentTask> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| ModelError::Decode(e.to_string())))
        .collect::<Result<_, _>>()?;
    validate_dataset(&tasks)?;
    Ok(tasks)
}

/// Runs rollouts as scheduler tasks on whatever backend the driver wraps.
pub struct AgentService {
    model: Arc<ModelService>,
    artifacts: Arc<ArtifactStore>,
    /// Backend time charged per environment step.
    pub round_ms: Millis,
}

impl AgentService {
    pub fn new(model: Arc<ModelService>, artifacts: Arc<ArtifactStore>) -> Self {
        Self { model, artifacts, round_ms: 30_000 }
    }

    pub fn with_round_ms(mut self, ms: Millis) -> Self {
        self.round_ms = ms;
        self
    }

    pub fn model(&self) -> &Arc<ModelService> {
        &self.model
    }

    pub fn artifacts(&self) -> &Arc<ArtifactStore> {
        &self.artifacts
    }

    pub fn factory(&self) -> Arc<dyn ProgramFactory> {
        Arc::new(Factory { model: self.model.clone(), artifacts: self.artifacts.clone(), round_ms: self.round_ms })
    }

    /// Registers the rollout program factory with the driver's control plane.
    pub fn attach(&self, driver: &mut dyn Driver) {
        driver.control_mut().set_program_factory(self.factory());
    }

    /// Submits every replica before waiting on any of them.
    pub fn run_batch(&self, driver: &mut dyn Driver, plan: &RolloutPlan) -> Result<Vec<RolloutResult>, AgentError> {
        plan.validate()?;
        self.attach(driver);
        let mut submitted = Vec::with_capacity(plan.parallelism());
        for task in &plan.tasks {
            for r in 0..plan.replicas {
                let seed = plan.replica_seed(&task.task_key, r);
                let spec = TaskSpec::new(task.clone()).mode(plan.mode).owner(plan.owner.clone()).workload(WorkloadSpec::Rollout {
                    policy_id: plan.policy_id.clone(),
                    run_id: plan.run_id.clone(),
                    replica_index: r,
                    seed,
                });
                let id = driver.submit(spec)?;
                submitted.push((id, task, r, seed));
            }
        }
        if let Err(e) = driver.run_until_idle() {
            log::warn!("batch {} ended early: {e}", plan.run_id);
        }
        let mut out = Vec::with_capacity(submitted.len());
        for (id, task, r, seed) in submitted {
            out.push(self.collect(driver, &id, task, r, seed));
        }
        Ok(out)
    }

    fn collect(&self, driver: &dyn Driver, id: &str, task: &AgentTask, replica: u32, seed: u64) -> RolloutResult {
        let rec = driver.control().task(id);
        let stored = rec
            .filter(|r| r.status == TaskStatus::Completed)
            .and_then(|r| r.result_ref.as_deref())
            .and_then(|key| self.artifacts.get_artifact(key).ok())
            .and_then(|bytes| serde_json::from_slice::<RolloutResult>(&bytes).ok());
        stored.unwrap_or_else(|| RolloutResult {
            task_id: id.to_string(),
            task_key: task.task_key.clone(),
            replica_index: replica,
            seed,
            trajectory_ref: None,
            reward: task.goal.non_termination_penalty,
            rounds: 0,
            termination_cause: TerminationCause::EnvironmentFailure,
            wall_duration_ms: 0,
            error: Some(rec.and_then(|r| r.last_error.clone()).unwrap_or_else(|| "task did not complete".into())),
        })
    }

    pub fn run_rollout(
        &self,
        driver: &mut dyn Driver,
        task: &AgentTask,
        policy_id: &str,
        mode: ExecutionMode,
        seed: u64,
    ) -> Result<RolloutResult, AgentError> {
        let mut plan = RolloutPlan::new(vec![task.clone()], 1, policy_id);
        plan.mode = mode;
        plan.master_seed = seed;
        plan.run_id = format!("rollout-{seed}");
        Ok(self.run_batch(driver, &plan)?.remove(0))
    }

    /// Loads each persisted trajectory and hands the batch to training.
    pub fn feed_experiences(&self, results: &[RolloutResult]) -> Result<ParamsVersion, AgentError> {
        let mut batch = ExperienceBatch { trajectories: Vec::with_capacity(results.len()), params_version_hint: self.model.params().version };
        for r in results {
            let Some(key) = &r.trajectory_ref else { continue };
            let text = String::from_utf8_lossy(&self.artifacts.get_artifact(key)?).into_owned();
            batch.trajectories.push((r.task_key.clone(), Trajectory::from_jsonl(&text)?));
        }
        Ok(self.model.train(&batch, &self.model.params())?)
    }

    /// Writes `metrics.json` for the run.
    pub fn write_metrics(&self, run_id: &str, metrics: &Metrics) -> Result<String, AgentError> {
        let key = crate::persistence::run_artifact_key(run_id, crate::persistence::METRICS_ARTIFACT);
        let body = serde_json::to_vec_pretty(metrics).map_err(|e| StoreError::Serde(e.to_string()))?;
        Ok(self.artifacts.put_artifact(&key, &body)?)
    }
}
