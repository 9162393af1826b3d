// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::task::AgentTask;
use super::ModelError;

/// Default reward for rollouts that never reach an explicit finish.
pub const DEFAULT_NON_TERMINATION_PENALTY: f64 = -0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Command,
    Edit,
    Finish,
}

impl ActionKind {
    pub const ALL: [ActionKind; 3] = [ActionKind::Command, ActionKind::Edit, ActionKind::Finish];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    /// Opaque to the control plane; backends interpret it.
    #[serde(default)]
    pub payload: String,
}

impl Action {
    pub fn command(payload: impl Into<String>) -> Self {
        Self { kind: ActionKind::Command, payload: payload.into() }
    }

    pub fn edit(payload: impl Into<String>) -> Self {
        Self { kind: ActionKind::Edit, payload: payload.into() }
    }

    pub fn finish(payload: impl Into<String>) -> Self {
        Self { kind: ActionKind::Finish, payload: payload.into() }
    }
}

/// Summary of an environment configuration at one point of a rollout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct State {
    /// Hex-encoded SHA-256 digest.
    pub digest: String,
    pub step_index: u32,
    /// Exit status of the last command, for backends that run real processes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_exit: Option<i32>,
}

impl State {
    pub fn initial(seed_material: &[u8]) -> Self {
        Self { digest: hex::encode(Sha256::digest(seed_material)), step_index: 0, last_exit: None }
    }

    /// Successor state after applying `action`; `observation` is folded into the digest.
    pub fn successor(&self, action: &Action, observation: &[u8], last_exit: Option<i32>) -> Self {
        let mut h = Sha256::new();
        h.update(self.digest.as_bytes());
        h.update([action.kind as u8]);
        h.update(action.payload.as_bytes());
        h.update(observation);
        Self { digest: hex::encode(h.finalize()), step_index: self.step_index + 1, last_exit }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: State,
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationCause {
    Finish,
    StepLimit,
    EnvironmentFailure,
}

impl TerminationCause {
    pub const ALL: [TerminationCause; 3] =
        [TerminationCause::Finish, TerminationCause::StepLimit, TerminationCause::EnvironmentFailure];

    pub fn as_str(self) -> &'static str {
        match self {
            TerminationCause::Finish => "finish",
            TerminationCause::StepLimit => "step_limit",
            TerminationCause::EnvironmentFailure => "environment_failure",
        }
    }
}

/// Ordered `(state, action)` pairs of one rollout.
///
/// A trajectory is closed to further steps once `terminated` is set, either by
/// a finish action or by [`finalize_trajectory`]. The reward only appears at
/// finalization.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub terminated: bool,
    pub termination_cause: Option<TerminationCause>,
    pub reward: Option<f64>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_finalized(&self) -> bool {
        self.reward.is_some()
    }

    pub fn last_action(&self) -> Option<&Action> {
        self.steps.last().map(|s| &s.action)
    }

    /// One JSON object per step, then a termination record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(&serde_json::to_string(step).expect("step serializes"));
            out.push('\n');
        }
        let end = TerminationRecord {
            terminated: self.terminated,
            termination_cause: self.termination_cause,
            reward: self.reward,
        };
        out.push_str(&serde_json::to_string(&end).expect("termination serializes"));
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, ModelError> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let (last, body) = lines.split_last().ok_or_else(|| ModelError::Decode("empty trajectory file".into()))?;
        let mut steps = Vec::with_capacity(body.len());
        for line in body {
            steps.push(serde_json::from_str::<Step>(line).map_err(|e| ModelError::Decode(e.to_string()))?);
        }
        let end: TerminationRecord = serde_json::from_str(last).map_err(|e| ModelError::Decode(e.to_string()))?;
        Ok(Self { steps, terminated: end.terminated, termination_cause: end.termination_cause, reward: end.reward })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TerminationRecord {
    terminated: bool,
    termination_cause: Option<TerminationCause>,
    reward: Option<f64>,
}

/// How the final reward of a trajectory is computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "evaluator_kind", content = "spec", rename_all = "kebab-case")]
pub enum GoalSpec {
    /// Passes when every `required` string occurs, in order, across the
    /// concatenated action payloads.
    Script {
        required: Vec<String>,
        #[serde(default = "one")]
        pass_reward: f64,
        #[serde(default)]
        fail_reward: f64,
    },
    /// Keyed by the payload of the final (finish) action.
    TableLookup {
        entries: BTreeMap<String, f64>,
        #[serde(default)]
        default: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn default_penalty() -> f64 {
    DEFAULT_NON_TERMINATION_PENALTY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalEvaluator {
    #[serde(flatten)]
    pub spec: GoalSpec,
    #[serde(default = "default_penalty")]
    pub non_termination_penalty: f64,
}

impl GoalEvaluator {
    pub fn table(entries: impl IntoIterator<Item = (String, f64)>, default: f64) -> Self {
        Self {
            spec: GoalSpec::TableLookup { entries: entries.into_iter().collect(), default },
            non_termination_penalty: DEFAULT_NON_TERMINATION_PENALTY,
        }
    }

    pub fn script(required: Vec<String>) -> Self {
        Self {
            spec: GoalSpec::Script { required, pass_reward: 1.0, fail_reward: 0.0 },
            non_termination_penalty: DEFAULT_NON_TERMINATION_PENALTY,
        }
    }

    pub fn with_penalty(mut self, penalty: f64) -> Self {
        self.non_termination_penalty = penalty;
        self
    }

    /// Deterministic in the trajectory.
    pub fn evaluate(&self, traj: &Trajectory) -> f64 {
        match &self.spec {
            GoalSpec::TableLookup { entries, default } => traj
                .last_action()
                .and_then(|a| entries.get(&a.payload))
                .copied()
                .unwrap_or(*default),
            GoalSpec::Script { required, pass_reward, fail_reward } => {
                let transcript: String = traj.steps.iter().map(|s| s.action.payload.as_str()).collect::<Vec<_>>().join("\n");
                let mut rest = transcript.as_str();
                for needle in required {
                    match rest.find(needle.as_str()) {
                        Some(at) => rest = &rest[at + needle.len()..],
                        None => return *fail_reward,
                    }
                }
                *pass_reward
            }
        }
    }
}

impl Default for GoalEvaluator {
    fn default() -> Self {
        Self::table(std::iter::empty(), 0.0)
    }
}

/// Appends `(state, action)` to the trajectory.
///
/// A finish action closes the trajectory with cause `finish`; the caller
/// still has to call [`finalize_trajectory`] to attach the reward.
pub fn append_step(mut traj: Trajectory, state: State, action: Action, task: &AgentTask) -> Result<Trajectory, ModelError> {
    if traj.terminated {
        return Err(ModelError::AppendAfterTermination);
    }
    if traj.steps.len() >= task.max_steps as usize {
        return Err(ModelError::StepLimitExceeded { max_steps: task.max_steps });
    }
    if !task.action_space.permits(action.kind) {
        return Err(ModelError::ActionNotPermitted(action.kind));
    }
    if state.step_index as usize != traj.steps.len() {
        return Err(ModelError::StepIndexGap { expected: traj.steps.len() as u32, got: state.step_index });
    }
    let finish = action.kind == ActionKind::Finish;
    traj.steps.push(Step { state, action });
    if finish {
        traj.terminated = true;
        traj.termination_cause = Some(TerminationCause::Finish);
    }
    Ok(traj)
}

/// Attaches the reward: the goal's value for `finish`, the non-termination
/// penalty for every other cause.
pub fn finalize_trajectory(mut traj: Trajectory, goal: &GoalEvaluator, cause: TerminationCause) -> Result<Trajectory, ModelError> {
    if traj.is_finalized() {
        return Err(ModelError::AlreadyFinalized);
    }
    match (traj.termination_cause, cause) {
        (Some(existing), requested) if existing != requested => {
            return Err(ModelError::CauseConflict { existing, requested });
        }
        // only a finish action sets the finish cause
        (None, TerminationCause::Finish) => return Err(ModelError::FinishWithoutAction),
        _ => {}
    }
    let reward = match cause {
        TerminationCause::Finish => goal.evaluate(&traj),
        TerminationCause::StepLimit | TerminationCause::EnvironmentFailure => goal.non_termination_penalty,
    };
    traj.terminated = true;
    traj.termination_cause = Some(cause);
    traj.reward = Some(reward);
    Ok(traj)
}

/// Terminated trajectories handed to the model service for a training step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperienceBatch {
    pub trajectories: Vec<(String, Trajectory)>,
    pub params_version_hint: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::task::{tests::sample_task, ActionSpace};

    fn state(i: u32) -> State {
        State { digest: format!("{i:064x}"), step_index: i, last_exit: None }
    }

    fn grow(task: &AgentTask, n: usize) -> Trajectory {
        let mut t = Trajectory::new();
        for i in 0..n {
            t = append_step(t, state(i as u32), Action::command("ls"), task).unwrap();
        }
        t
    }

    #[test]
    fn append_to_empty() {
        let task = sample_task("t");
        let t = append_step(Trajectory::new(), state(0), Action::command("echo"), &task).unwrap();
        assert_eq!(t.len(), 1);
        assert!(!t.terminated);
        assert!(t.reward.is_none());
    }

    #[test]
    fn append_up_to_the_step_limit() {
        let task = sample_task("t");
        assert_eq!(task.max_steps, 100);
        let t = grow(&task, 99);
        let t = append_step(t, state(99), Action::command("ls"), &task).unwrap();
        assert_eq!(t.len(), 100);
        assert!(!t.terminated);
        let err = append_step(t.clone(), state(100), Action::command("ls"), &task).unwrap_err();
        assert!(matches!(err, ModelError::StepLimitExceeded { max_steps: 100 }));
        let t = finalize_trajectory(t, &GoalEvaluator::default(), TerminationCause::StepLimit).unwrap();
        assert_eq!(t.reward, Some(-0.5));
    }

    #[test]
    fn finish_closes_the_trajectory() {
        let task = sample_task("t");
        let t = grow(&task, 3);
        let t = append_step(t, state(3), Action::finish("done"), &task).unwrap();
        assert_eq!(t.len(), 4);
        assert!(t.terminated);
        assert_eq!(t.termination_cause, Some(TerminationCause::Finish));
        assert!(matches!(append_step(t, state(4), Action::command("x"), &task), Err(ModelError::AppendAfterTermination)));
    }

    #[test]
    fn termination_cause_matrix() {
        let task = sample_task("t");
        let goal = GoalEvaluator::table([("done".to_string(), 1.0)], 0.0);
        for cause in TerminationCause::ALL {
            let mut t = grow(&task, 2);
            if cause == TerminationCause::Finish {
                t = append_step(t, state(2), Action::finish("done"), &task).unwrap();
            }
            let t = finalize_trajectory(t, &goal, cause).unwrap();
            assert!(t.terminated);
            assert_eq!(t.termination_cause, Some(cause));
            let expected = if cause == TerminationCause::Finish { 1.0 } else { -0.5 };
            assert_eq!(t.reward, Some(expected), "{cause:?}");
        }
    }

    #[test]
    fn finalize_twice_is_rejected() {
        let t = finalize_trajectory(Trajectory::new(), &GoalEvaluator::default(), TerminationCause::StepLimit).unwrap();
        assert!(matches!(
            finalize_trajectory(t, &GoalEvaluator::default(), TerminationCause::StepLimit),
            Err(ModelError::AlreadyFinalized)
        ));
    }

    #[test]
    fn finish_cause_needs_finish_action() {
        let task = sample_task("t");
        let t = grow(&task, 2);
        assert!(matches!(
            finalize_trajectory(t, &GoalEvaluator::default(), TerminationCause::Finish),
            Err(ModelError::FinishWithoutAction)
        ));
        let t = append_step(grow(&task, 1), state(1), Action::finish(""), &task).unwrap();
        assert!(matches!(
            finalize_trajectory(t, &GoalEvaluator::default(), TerminationCause::StepLimit),
            Err(ModelError::CauseConflict { .. })
        ));
    }

    #[test]
    fn action_space_is_enforced() {
        let mut task = sample_task("t");
        task.action_space = ActionSpace::new([ActionKind::Command, ActionKind::Finish]);
        let err = append_step(Trajectory::new(), state(0), Action::edit("x"), &task).unwrap_err();
        assert!(matches!(err, ModelError::ActionNotPermitted(ActionKind::Edit)));
    }

    #[test]
    fn script_goal_checks_order() {
        let task = sample_task("t");
        let mut t = Trajectory::new();
        for (i, p) in ["cargo build", "cargo test", "git diff"].iter().enumerate() {
            t = append_step(t, state(i as u32), Action::command(*p), &task).unwrap();
        }
        assert_eq!(GoalEvaluator::script(vec!["build".into(), "test".into()]).evaluate(&t), 1.0);
        assert_eq!(GoalEvaluator::script(vec!["test".into(), "build".into()]).evaluate(&t), 0.0);
    }

    #[test]
    fn jsonl_round_trip() {
        let task = sample_task("t");
        let t = append_step(grow(&task, 2), state(2), Action::finish("done"), &task).unwrap();
        let t = finalize_trajectory(t, &GoalEvaluator::table([("done".into(), 1.0)], 0.0), TerminationCause::Finish).unwrap();
        let text = t.to_jsonl();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().last().unwrap().contains("\"termination_cause\":\"finish\""));
        assert_eq!(Trajectory::from_jsonl(&text).unwrap(), t);
    }

    #[test]
    fn goal_serializes_with_kind_tag() {
        let g = GoalEvaluator::table([("a".into(), 1.0)], 0.0);
        let v = serde_json::to_value(&g).unwrap();
        assert_eq!(v["evaluator_kind"], "table-lookup");
        assert_eq!(v["non_termination_penalty"], -0.5);
        let back: GoalEvaluator = serde_json::from_value(v).unwrap();
        assert_eq!(back, g);
    }
}
