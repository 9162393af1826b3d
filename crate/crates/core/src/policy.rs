// SPDX-License-Identifier: Apache-2.0

//! Model service: policy inference behind the rate gate, plus a training
//! stub that only versions parameters and records batch statistics.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::limits::{LimitError, Limits};
use crate::model::{Action, ActionKind, AgentTask, ExperienceBatch, Trajectory};
use crate::persistence::{run_artifact_key, ArtifactStore, StoreError};
use crate::sim::derive_seed;
use crate::time::Millis;

const WEIGHT_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("script for {task_key} has no action for call {call}")]
    ScriptExhausted { task_key: String, call: u32 },
    #[error("no script for task {0}")]
    NoScript(String),
    #[error("unknown policy {0}")]
    UnknownPolicy(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("rate limited; retry after {0} ms")]
    RateLimited(Millis),
    #[error("trajectory {0} in batch is not terminated")]
    UnterminatedTrajectory(usize),
    #[error("bad script file: {0}")]
    BadScript(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Π(A): candidate actions with weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    candidates: Vec<(Action, f64)>,
}

impl ActionDistribution {
    pub fn new(candidates: Vec<(Action, f64)>) -> Result<Self, PolicyError> {
        if candidates.is_empty() {
            return Err(PolicyError::InvalidDistribution("empty".into()));
        }
        if candidates.iter().any(|(_, w)| !w.is_finite() || *w < 0.0) {
            return Err(PolicyError::InvalidDistribution("negative or non-finite weight".into()));
        }
        let sum: f64 = candidates.iter().map(|(_, w)| w).sum();
        if (sum - 1.0).abs() > WEIGHT_EPS {
            return Err(PolicyError::InvalidDistribution(format!("weights sum to {sum}")));
        }
        Ok(Self { candidates })
    }

    /// Scales non-negative weights to sum to one.
    pub fn normalized(candidates: Vec<(Action, f64)>) -> Result<Self, PolicyError> {
        let sum: f64 = candidates.iter().map(|(_, w)| w).sum();
        if !(sum > 0.0) {
            return Err(PolicyError::InvalidDistribution("weights sum to zero".into()));
        }
        let mut out: Vec<(Action, f64)> = candidates.into_iter().map(|(a, w)| (a, w / sum)).collect();
        // absorb rounding so the invariant holds exactly enough
        let drift = 1.0 - out.iter().map(|(_, w)| w).sum::<f64>();
        if let Some(last) = out.last_mut() {
            last.1 = (last.1 + drift).max(0.0);
        }
        Self::new(out)
    }

    pub fn certain(action: Action) -> Self {
        Self { candidates: vec![(action, 1.0)] }
    }

    pub fn candidates(&self) -> &[(Action, f64)] {
        &self.candidates
    }

    pub fn total_weight(&self) -> f64 {
        self.candidates.iter().map(|(_, w)| w).sum()
    }

    /// Highest weight; the earliest candidate wins ties.
    pub fn argmax(&self) -> &Action {
        let mut best = 0;
        for (i, (_, w)) in self.candidates.iter().enumerate() {
            if *w > self.candidates[best].1 {
                best = i;
            }
        }
        &self.candidates[best].0
    }

    pub fn sample(&self, rng: &mut impl Rng) -> &Action {
        let mut u: f64 = rng.random();
        for (a, w) in &self.candidates {
            if u < *w {
                return a;
            }
            u -= w;
        }
        &self.candidates.last().expect("non-empty").0
    }
}

/// How the agent turns a distribution into one action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Argmax,
    Sample,
}

/// Input to inference: 𝒮 × Θ.
#[derive(Debug, Clone, Copy)]
pub struct PolicyContext<'a> {
    pub task: &'a AgentTask,
    pub trajectory: &'a Trajectory,
    pub params_version: u64,
    /// Replica seed; stochastic policies derive their randomness from it.
    pub seed: u64,
}

impl PolicyContext<'_> {
    /// 1-based index of the call being answered.
    pub fn call(&self) -> u32 {
        self.trajectory.len() as u32 + 1
    }

    fn rng(&self, stream: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[stream, &self.call().to_string()]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub distribution: ActionDistribution,
    /// Simulated model latency before the reply is available.
    pub latency_ms: Millis,
}

pub trait Policy: Send + Sync {
    fn infer(&self, ctx: &PolicyContext<'_>) -> Result<Inference, PolicyError>;

    fn selection(&self) -> Selection {
        Selection::Argmax
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub task_key: String,
    pub actions: Vec<Action>,
    /// 1-based call that returns the finish action.
    pub finish_at: u32,
    /// Payload of the finish action, looked up by table goal evaluators.
    #[serde(default)]
    pub finish_payload: String,
}

/// Replays a fixed per-task script.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    scripts: BTreeMap<String, Script>,
}

impl ScriptedPolicy {
    pub fn new(scripts: impl IntoIterator<Item = Script>) -> Self {
        Self { scripts: scripts.into_iter().map(|s| (s.task_key.clone(), s)).collect() }
    }

    /// Accepts one script object, an array of them, or JSON lines.
    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let bad = |e: serde_json::Error| PolicyError::BadScript(e.to_string());
        let trimmed = text.trim_start();
        let scripts: Vec<Script> = if trimmed.starts_with('[') {
            serde_json::from_str(trimmed).map_err(bad)?
        } else if let Ok(one) = serde_json::from_str::<Script>(trimmed) {
            vec![one]
        } else {
            trimmed.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>().map_err(bad)?
        };
        Ok(Self::new(scripts))
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path).map_err(|e| PolicyError::BadScript(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn insert(&mut self, script: Script) {
        self.scripts.insert(script.task_key.clone(), script);
    }
}

impl Policy for ScriptedPolicy {
    fn infer(&self, ctx: &PolicyContext<'_>) -> Result<Inference, PolicyError> {
        let key = &ctx.task.task_key;
        let script = self.scripts.get(key).ok_or_else(|| PolicyError::NoScript(key.clone()))?;
        let call = ctx.call();
        let action = if call == script.finish_at {
            Action::finish(script.finish_payload.clone())
        } else {
            script
                .actions
                .get(call as usize - 1)
                .cloned()
                .ok_or_else(|| PolicyError::ScriptExhausted { task_key: key.clone(), call })?
        };
        Ok(Inference { distribution: ActionDistribution::certain(action), latency_ms: 0 })
    }
}

/// Always proposes the same action; with a non-finish action it never
/// terminates on its own.
#[derive(Debug, Clone)]
pub struct ConstantPolicy {
    pub action: Action,
}

impl ConstantPolicy {
    pub fn never_finish() -> Self {
        Self { action: Action::command("true") }
    }
}

impl Policy for ConstantPolicy {
    fn infer(&self, _ctx: &PolicyContext<'_>) -> Result<Inference, PolicyError> {
        Ok(Inference { distribution: ActionDistribution::certain(self.action.clone()), latency_ms: 0 })
    }
}

/// Uniform over the task's permitted action kinds; payloads come from a
/// small fixed vocabulary. Randomness is derived from the replica seed and
/// the call index, so replays are exact.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    pub commands: Vec<String>,
    pub finish_payloads: Vec<String>,
}

impl Default for RandomPolicy {
    fn default() -> Self {
        Self {
            commands: vec!["ls".into(), "cat README".into(), "make test".into()],
            finish_payloads: vec!["pass".into(), "fail".into()],
        }
    }
}

impl Policy for RandomPolicy {
    fn infer(&self, ctx: &PolicyContext<'_>) -> Result<Inference, PolicyError> {
        let mut rng = ctx.rng("random-policy");
        let mut pick = |v: &[String]| v.get(rng.random_range(0..v.len().max(1))).cloned().unwrap_or_default();
        let kinds: Vec<ActionKind> = ctx.task.action_space.kinds().collect();
        let w = 1.0 / kinds.len() as f64;
        let candidates = kinds
            .into_iter()
            .map(|k| {
                let a = match k {
                    ActionKind::Command => Action::command(pick(&self.commands)),
                    ActionKind::Edit => Action::edit(format!("notes.txt\n{}", pick(&self.commands))),
                    ActionKind::Finish => Action::finish(pick(&self.finish_payloads)),
                };
                (a, w)
            })
            .collect();
        Ok(Inference { distribution: ActionDistribution::normalized(candidates)?, latency_ms: 0 })
    }

    fn selection(&self) -> Selection {
        Selection::Sample
    }
}

/// Reply-latency distribution for [`WithLatency`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencyModel {
    Fixed { ms: Millis },
    LogNormal { mean_ms: f64, sigma: f64 },
}

impl LatencyModel {
    fn sample(&self, rng: &mut impl Rng) -> Millis {
        match *self {
            LatencyModel::Fixed { ms } => ms,
            LatencyModel::LogNormal { mean_ms, sigma } => {
                let mu = mean_ms.ln() - sigma * sigma / 2.0;
                let d = LogNormal::new(mu, sigma).expect("valid lognormal");
                d.sample(rng).round() as Millis
            }
        }
    }
}

pub struct WithLatency<P> {
    pub inner: P,
    pub latency: LatencyModel,
}

impl<P: Policy> Policy for WithLatency<P> {
    fn infer(&self, ctx: &PolicyContext<'_>) -> Result<Inference, PolicyError> {
        let mut out = self.inner.infer(ctx)?;
        out.latency_ms += self.latency.sample(&mut ctx.rng("latency"));
        Ok(out)
    }

    fn selection(&self) -> Selection {
        self.inner.selection()
    }
}

/// Θ, identified by a monotone version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamsVersion {
    pub version: u64,
    pub tag: String,
}

impl ParamsVersion {
    pub fn initial() -> Self {
        Self { version: 0, tag: "init".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub version: u64,
    pub count: usize,
    pub mean_reward: f64,
}

/// Policies by id, the rate gate in front of them, and the parameter stub.
pub struct ModelService {
    policies: BTreeMap<String, Arc<dyn Policy>>,
    limits: Arc<Limits>,
    artifacts: Arc<ArtifactStore>,
    run_id: String,
    params: Mutex<ParamsVersion>,
    train_lock: Mutex<()>,
    infer_calls: AtomicU64,
    denied: AtomicU64,
}

impl std::fmt::Debug for ModelService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelService")
            .field("policies", &self.policies.keys().collect::<Vec<_>>())
            .field("params", &*self.params.lock())
            .finish()
    }
}

impl ModelService {
    pub fn new(limits: Arc<Limits>, artifacts: Arc<ArtifactStore>, run_id: impl Into<String>) -> Self {
        Self {
            policies: BTreeMap::new(),
            limits,
            artifacts,
            run_id: run_id.into(),
            params: Mutex::new(ParamsVersion::initial()),
            train_lock: Mutex::new(()),
            infer_calls: AtomicU64::new(0),
            denied: AtomicU64::new(0),
        }
    }

    pub fn register(&mut self, id: impl Into<String>, policy: Arc<dyn Policy>) {
        self.policies.insert(id.into(), policy);
    }

    pub fn with_policy(mut self, id: impl Into<String>, policy: Arc<dyn Policy>) -> Self {
        self.register(id, policy);
        self
    }

    pub fn policy(&self, id: &str) -> Result<&Arc<dyn Policy>, PolicyError> {
        self.policies.get(id).ok_or_else(|| PolicyError::UnknownPolicy(id.to_string()))
    }

    pub fn params(&self) -> ParamsVersion {
        self.params.lock().clone()
    }

    /// Calls that reached a policy; every one held a rate grant.
    pub fn infer_calls(&self) -> u64 {
        self.infer_calls.load(Ordering::Relaxed)
    }

    pub fn rate_denials(&self) -> u64 {
        self.denied.load(Ordering::Relaxed)
    }

    /// Acquires a tier-1 grant for `owner`, then asks the policy.
    pub fn infer(&self, policy_id: &str, owner: &str, ctx: &PolicyContext<'_>, now: Millis) -> Result<Inference, PolicyError> {
        let policy = self.policy(policy_id)?;
        match self.limits.model_call(owner, now) {
            Ok(()) => {}
            Err(LimitError::RateLimited(retry)) => {
                self.denied.fetch_add(1, Ordering::Relaxed);
                return Err(PolicyError::RateLimited(retry));
            }
            Err(other) => return Err(PolicyError::InvalidDistribution(other.to_string())),
        }
        self.infer_calls.fetch_add(1, Ordering::Relaxed);
        policy.infer(ctx)
    }

    /// Θ → Θ′. Serialized; only validates, versions and records statistics.
    pub fn train(&self, batch: &ExperienceBatch, params: &ParamsVersion) -> Result<ParamsVersion, PolicyError> {
        let _guard = self.train_lock.lock();
        if let Some(i) = batch.trajectories.iter().position(|(_, t)| !t.is_finalized()) {
            return Err(PolicyError::UnterminatedTrajectory(i));
        }
        let mut current = self.params.lock();
        let base = current.version.max(params.version);
        let next = ParamsVersion { version: base + 1, tag: format!("v{}", base + 1) };
        let count = batch.trajectories.len();
        let sum: f64 = batch.trajectories.iter().map(|(_, t)| t.reward.unwrap_or(0.0)).sum();
        let stats = TrainStats { version: next.version, count, mean_reward: if count == 0 { 0.0 } else { sum / count as f64 } };
        let key = run_artifact_key(&self.run_id, &format!("train/stats-v{}.json", next.version));
        let body = serde_json::to_vec_pretty(&stats).map_err(|e| StoreError::Serde(e.to_string()))?;
        self.artifacts.put_artifact(&key, &body)?;
        *current = next.clone();
        Ok(next)
    }

    pub fn stats_key(&self, version: u64) -> String {
        run_artifact_key(&self.run_id, &format!("train/stats-v{version}.json"))
    }
}
