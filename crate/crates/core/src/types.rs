//! Domain types shared by every stage of the pipeline: questions, actions,
//! trajectories, rollout groups and the dual-path outcome.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Opaque question identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuestionId(pub u64);

impl fmt::Display for QuestionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{}", self.0)
    }
}

/// A synthetic question with a known knowledge boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub id: QuestionId,
    pub features: Vec<f64>,
    /// Probability that a memory-based answer is correct.
    pub p_param: f64,
    /// Minimum number of useful retrievals for an evidence-based answer.
    pub hops_required: usize,
    /// Probability that a single retrieval returns misleading evidence.
    pub noise_rate: f64,
    pub answer_id: u64,
}

impl QuestionSpec {
    pub fn validate(&self, max_turns: usize) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.p_param) {
            return Err(format!("{}: p_param {} outside [0, 1]", self.id, self.p_param));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(format!("{}: noise_rate {} outside [0, 1]", self.id, self.noise_rate));
        }
        if self.hops_required > max_turns {
            return Err(format!(
                "{}: hops_required {} exceeds max_turns {}",
                self.id, self.hops_required, max_turns
            ));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(format!("{}: non-finite feature", self.id));
        }
        Ok(())
    }
}

/// The four-way discrete action set. The declaration order is the row order
/// of the policy's weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    ToolCall,
    AnswerMemory,
    AnswerEvidence,
    Malformed,
}

impl Action {
    pub const COUNT: usize = 4;
    pub const ALL: [Action; 4] = [
        Action::ToolCall,
        Action::AnswerMemory,
        Action::AnswerEvidence,
        Action::Malformed,
    ];

    pub fn index(self) -> usize {
        match self {
            Action::ToolCall => 0,
            Action::AnswerMemory => 1,
            Action::AnswerEvidence => 2,
            Action::Malformed => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn is_terminal(self) -> bool {
        !matches!(self, Action::ToolCall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    Useful,
    Misleading,
}

/// One agent turn. Observations carry no log-probability: they are
/// environment output, never policy output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<ObservationKind>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutPath {
    WithTool,
    NoTool,
}

impl RolloutPath {
    pub(crate) fn stream_tag(self) -> u64 {
        match self {
            RolloutPath::WithTool => 1,
            RolloutPath::NoTool => 2,
        }
    }
}

/// A complete rollout: actions, observations, tool-call count, judged
/// correctness and the reward computed once at rollout time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question_id: QuestionId,
    pub path: RolloutPath,
    pub steps: Vec<Step>,
    pub tc: usize,
    pub correct: bool,
    pub format_ok: bool,
    pub reward: i8,
}

impl Trajectory {
    pub fn terminal_action(&self) -> Option<Action> {
        self.steps.last().map(|s| s.action)
    }

    /// Format-valid and correct.
    pub fn is_success(&self) -> bool {
        self.reward == 1
    }

    pub fn sampled_log_prob(&self) -> f64 {
        self.steps.iter().map(|s| s.log_prob).sum()
    }
}

/// Number of tool invocations in a trajectory.
pub fn tool_call_count(traj: &Trajectory) -> usize {
    traj.steps.iter().filter(|s| s.action == Action::ToolCall).count()
}

/// Checks every structural trajectory invariant, naming the first violation.
pub fn validate_trajectory(traj: &Trajectory) -> Result<(), String> {
    let Some(last) = traj.steps.last() else {
        return Err("empty trajectory".into());
    };
    for (i, step) in traj.steps.iter().enumerate() {
        if step.action == Action::ToolCall && traj.path == RolloutPath::NoTool {
            return Err("tool call on no-tool path".into());
        }
        match (step.action, step.observation) {
            (Action::ToolCall, None) => return Err(format!("step {i}: tool call without observation")),
            (a, Some(_)) if a.is_terminal() => return Err(format!("step {i}: observation on terminal action")),
            _ => {}
        }
        if step.log_prob.is_nan() || step.log_prob > 0.0 {
            return Err(format!("step {i}: log_prob {} is not <= 0", step.log_prob));
        }
        if i + 1 < traj.steps.len() && step.action.is_terminal() {
            return Err(format!("step {i}: terminal action before the last step"));
        }
    }
    if !last.action.is_terminal() {
        return Err("last action is not terminal".into());
    }
    let counted = tool_call_count(traj);
    if traj.tc != counted {
        return Err(format!("tc {} does not match {} tool-call steps", traj.tc, counted));
    }
    let malformed = last.action == Action::Malformed;
    if traj.format_ok == malformed {
        return Err(format!(
            "format_ok = {} inconsistent with terminal action {:?}",
            traj.format_ok, last.action
        ));
    }
    if malformed && traj.correct {
        return Err("malformed answer marked correct".into());
    }
    let expected = crate::grpo::final_reward(traj.correct, traj.format_ok);
    if traj.reward != expected {
        return Err(format!(
            "reward {} inconsistent with final reward {}",
            traj.reward, expected
        ));
    }
    Ok(())
}

/// All with-tool and no-tool rollouts for one question in one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub question: QuestionSpec,
    pub with_tool: Vec<Trajectory>,
    pub no_tool: Vec<Trajectory>,
}

impl RolloutGroup {
    pub fn validate(&self) -> Result<(), String> {
        for t in &self.with_tool {
            if t.path != RolloutPath::WithTool {
                return Err("no-tool trajectory in with-tool list".into());
            }
        }
        for t in &self.no_tool {
            if t.path != RolloutPath::NoTool {
                return Err("with-tool trajectory in no-tool list".into());
            }
        }
        for t in self.with_tool.iter().chain(&self.no_tool) {
            if t.question_id != self.question.id {
                return Err(format!(
                    "trajectory for {} in group of {}",
                    t.question_id, self.question.id
                ));
            }
            validate_trajectory(t)?;
        }
        Ok(())
    }
}

/// Trajectory category from the pair of path outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    /// Only the with-tool path succeeds.
    ToolDependent,
    /// Both paths succeed; tools are redundant.
    Efficiency,
    /// Only the no-tool path succeeds; tools hurt.
    Hallucination,
    BothWrong,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::ToolDependent,
        Category::Efficiency,
        Category::Hallucination,
        Category::BothWrong,
    ];

    pub fn from_outcomes(wt: bool, nt: bool) -> Category {
        match (wt, nt) {
            (true, false) => Category::ToolDependent,
            (true, true) => Category::Efficiency,
            (false, true) => Category::Hallucination,
            (false, false) => Category::BothWrong,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Category::ToolDependent => 0,
            Category::Efficiency => 1,
            Category::Hallucination => 2,
            Category::BothWrong => 3,
        }
    }
}

/// Result of comparing the two rollout paths of one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPathOutcome {
    pub question_id: QuestionId,
    pub wt: bool,
    pub nt: bool,
    /// Knowledge-boundary bit; always equal to `nt`.
    pub kb: bool,
    pub category: Category,
    pub target: Option<Trajectory>,
}
