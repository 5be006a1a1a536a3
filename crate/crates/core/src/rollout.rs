//! With-tool and no-tool rollouts and dual-path group assembly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvState, World};
use crate::error::{AkbeError, Result};
use crate::grpo::final_reward;
use crate::policy::{action_distribution, featurize, sample_action, PolicyParams};
use crate::rng::{self, tag};
use crate::types::{Action, QuestionSpec, RolloutGroup, RolloutPath, Step, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutBudget {
    pub g_wt: usize,
    pub g_nt: usize,
    pub max_turns: usize,
}

impl Default for RolloutBudget {
    fn default() -> Self {
        RolloutBudget {
            g_wt: 16,
            g_nt: 8,
            max_turns: 6,
        }
    }
}

impl RolloutBudget {
    pub fn validate(&self) -> Result<()> {
        if self.g_wt == 0 || self.g_nt == 0 || self.max_turns == 0 {
            return Err(AkbeError::Config(format!(
                "rollout budget must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Identifies the batch a rollout belongs to; combined with the question id,
/// path and rollout index it names an independent RNG stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutKey {
    pub seed: u64,
    pub step: u64,
}

impl RolloutKey {
    pub fn stream(&self, q: &QuestionSpec, path: RolloutPath, index: usize) -> rng::StreamRng {
        rng::stream(
            self.seed,
            &[tag::ROLLOUT, self.step, q.id.0, path.stream_tag(), index as u64],
        )
    }
}

/// How actions are chosen during a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoding {
    Sample,
    Greedy,
}

/// Runs one episode. Tool calls are allowed on the with-tool path until the
/// turn budget is spent, after which only terminal actions remain.
pub fn rollout_one(
    params: &PolicyParams,
    world: &World,
    q: &QuestionSpec,
    path: RolloutPath,
    decoding: Decoding,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    let max_turns = world.max_turns;
    let mut state = EnvState::default();
    let mut steps = Vec::new();
    loop {
        let tool_allowed = path == RolloutPath::WithTool && state.turn < max_turns;
        let phi = featurize(q, &state, max_turns);
        let dist = action_distribution(params, &phi, tool_allowed)?;
        let (action, log_prob) = match decoding {
            Decoding::Sample => sample_action(&dist, rng)?,
            Decoding::Greedy => {
                let a = dist.argmax();
                (a, dist.log_prob(a))
            }
        };
        if action.is_terminal() {
            let correct = env::judge(q, &state, action, world.eta_poison, rng)?;
            steps.push(Step {
                action,
                observation: None,
                log_prob,
            });
            let format_ok = action != Action::Malformed;
            return Ok(Trajectory {
                question_id: q.id,
                path,
                tc: state.turn,
                steps,
                correct,
                format_ok,
                reward: final_reward(correct, format_ok),
            });
        }
        let (observation, next) = env::env_transition(q, state, action, max_turns, rng)
            .map_err(|e| AkbeError::Contract(format!("rollout produced an invalid transition: {e}")))?;
        steps.push(Step {
            action,
            observation,
            log_prob,
        });
        state = next;
    }
}

fn rollouts(
    params: &PolicyParams,
    world: &World,
    q: &QuestionSpec,
    path: RolloutPath,
    count: usize,
    key: RolloutKey,
) -> Result<Vec<Trajectory>> {
    (0..count)
        .map(|i| {
            let mut rng = key.stream(q, path, i);
            rollout_one(params, world, q, path, Decoding::Sample, &mut rng)
        })
        .collect()
}

fn check_budget(world: &World, budget: &RolloutBudget) -> Result<()> {
    budget.validate()?;
    if budget.max_turns != world.max_turns {
        return Err(AkbeError::Config(format!(
            "budget max_turns {} differs from world max_turns {}",
            budget.max_turns, world.max_turns
        )));
    }
    Ok(())
}

/// Samples `g_wt` trajectories with tool access.
pub fn rollout_with_tool(
    params: &PolicyParams,
    world: &World,
    q: &QuestionSpec,
    budget: &RolloutBudget,
    key: RolloutKey,
) -> Result<Vec<Trajectory>> {
    check_budget(world, budget)?;
    rollouts(params, world, q, RolloutPath::WithTool, budget.g_wt, key)
}

/// Samples `g_nt` trajectories with tool access disabled.
pub fn rollout_no_tool(
    params: &PolicyParams,
    world: &World,
    q: &QuestionSpec,
    budget: &RolloutBudget,
    key: RolloutKey,
) -> Result<Vec<Trajectory>> {
    check_budget(world, budget)?;
    rollouts(params, world, q, RolloutPath::NoTool, budget.g_nt, key)
}

/// Both rollout paths for one question. The paths draw from disjoint
/// streams, so running them concurrently yields the same group.
pub fn run_dual_path(
    params: &PolicyParams,
    world: &World,
    q: &QuestionSpec,
    budget: &RolloutBudget,
    key: RolloutKey,
    concurrent: bool,
) -> Result<RolloutGroup> {
    let (wt, nt) = if concurrent {
        rayon::join(
            || rollout_with_tool(params, world, q, budget, key),
            || rollout_no_tool(params, world, q, budget, key),
        )
    } else {
        (
            rollout_with_tool(params, world, q, budget, key),
            rollout_no_tool(params, world, q, budget, key),
        )
    };
    Ok(RolloutGroup {
        question: q.clone(),
        with_tool: wt?,
        no_tool: nt?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::WorldConfig;
    use crate::policy::STATE_FEATURES;
    use crate::types::validate_trajectory;

    fn world() -> World {
        World::generate(
            &WorldConfig {
                n_questions: 30,
                ..WorldConfig::default()
            },
            6,
        )
        .unwrap()
    }

    fn params(world: &World, seed: u64) -> PolicyParams {
        let mut rng = rng::stream(seed, &[]);
        PolicyParams::random(world.feature_dim() + STATE_FEATURES, 0.8, &mut rng)
    }

    #[test]
    fn group_sizes_and_validity() {
        let w = world();
        let p = params(&w, 1);
        let budget = RolloutBudget::default();
        for q in &w.questions {
            let g = run_dual_path(&p, &w, q, &budget, RolloutKey { seed: 3, step: 0 }, false).unwrap();
            assert_eq!(g.with_tool.len(), 16);
            assert_eq!(g.no_tool.len(), 8);
            g.validate().unwrap();
            for t in &g.with_tool {
                assert!(t.tc <= 6);
                assert!(t.steps.len() <= 7);
            }
            for t in &g.no_tool {
                assert_eq!(t.tc, 0);
                assert_eq!(t.steps.len(), 1);
                assert!(t.steps.iter().all(|s| s.action != Action::ToolCall));
            }
        }
    }

    #[test]
    fn tool_heavy_policy_hits_the_budget() {
        let w = world();
        let mut p = PolicyParams::zeros(w.feature_dim() + STATE_FEATURES);
        p.weights.set(0, p.feature_dim() - 1, 50.0);
        let budget = RolloutBudget::default();
        let trajs = rollout_with_tool(&p, &w, &w.questions[0], &budget, RolloutKey { seed: 0, step: 0 }).unwrap();
        for t in trajs {
            assert_eq!(t.tc, 6);
            validate_trajectory(&t).unwrap();
        }
    }

    #[test]
    fn deterministic_and_concurrency_independent() {
        let w = world();
        let p = params(&w, 2);
        let budget = RolloutBudget::default();
        let key = RolloutKey { seed: 17, step: 5 };
        for q in w.questions.iter().take(10) {
            let a = run_dual_path(&p, &w, q, &budget, key, false).unwrap();
            let b = run_dual_path(&p, &w, q, &budget, key, true).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn minimal_budget() {
        let w = world();
        let p = params(&w, 2);
        let budget = RolloutBudget {
            g_wt: 1,
            g_nt: 1,
            max_turns: 6,
        };
        let g = run_dual_path(&p, &w, &w.questions[0], &budget, RolloutKey { seed: 0, step: 0 }, true).unwrap();
        assert_eq!((g.with_tool.len(), g.no_tool.len()), (1, 1));
    }

    #[test]
    fn memory_biased_policy_on_certain_question() {
        let mut w = world();
        w.questions[0].p_param = 1.0;
        let mut p = PolicyParams::zeros(w.feature_dim() + STATE_FEATURES);
        p.weights.set(1, p.feature_dim() - 1, 60.0);
        let budget = RolloutBudget::default();
        let nt = rollout_no_tool(&p, &w, &w.questions[0], &budget, RolloutKey { seed: 0, step: 0 }).unwrap();
        assert_eq!(nt.len(), 8);
        assert!(nt.iter().all(|t| t.reward == 1));
    }

    #[test]
    fn budget_mismatch_is_rejected() {
        let w = world();
        let p = params(&w, 2);
        let budget = RolloutBudget {
            max_turns: 4,
            ..RolloutBudget::default()
        };
        assert!(rollout_with_tool(&p, &w, &w.questions[0], &budget, RolloutKey { seed: 0, step: 0 }).is_err());
    }
}
