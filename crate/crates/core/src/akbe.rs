//! Boundary-guided signals: dual-path classification, target selection, the
//! cross-entropy auxiliary loss and its joint objective with the RL loss,
//! plus the preference-pair (DPO) variant.
//!
//! Per question, the with-tool path (WT) and no-tool path (NT) each succeed
//! if at least one rollout earns reward 1. The pair selects the category and
//! the supervision target:
//!
//! | WT | NT | category        | target                                   |
//! |----|----|-----------------|------------------------------------------|
//! | 1  | 0  | tool-dependent  | correct with-tool rollout with fewest calls |
//! | 1  | 1  | efficiency      | random correct no-tool rollout           |
//! | 0  | 1  | hallucination   | random correct no-tool rollout           |
//! | 0  | 0  | both-wrong      | none                                     |

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::World;
use crate::error::{AkbeError, Result};
use crate::grpo::LossGrad;
use crate::policy::{self, PolicyParams};
use crate::types::{Category, DualPathOutcome, QuestionId, RolloutGroup, RolloutPath, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AkbeVariant {
    #[default]
    Ce,
    Dpo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AkbeConfig {
    pub lambda: f64,
    pub variant: AkbeVariant,
    pub dpo_beta: f64,
    /// When set, the cross-entropy term becomes a clipped ratio surrogate
    /// against the sampling-time log-probabilities.
    pub ce_clip: Option<f64>,
    /// Divide the auxiliary loss by the number of signals.
    pub normalize_akbe_by_signals: bool,
}

impl Default for AkbeConfig {
    fn default() -> Self {
        AkbeConfig {
            lambda: 0.05,
            variant: AkbeVariant::Ce,
            dpo_beta: 0.1,
            ce_clip: None,
            normalize_akbe_by_signals: false,
        }
    }
}

impl AkbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(AkbeError::Config("lambda must be nonnegative".into()));
        }
        if self.dpo_beta.is_nan() || self.dpo_beta <= 0.0 {
            return Err(AkbeError::Config("dpo_beta must be positive".into()));
        }
        if let Some(eps) = self.ce_clip {
            if eps.is_nan() || eps <= 0.0 {
                return Err(AkbeError::Config("ce_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// λ that balances one full-weight target against `g_wt` RL trajectories.
pub fn lambda_default(g_wt: usize) -> f64 {
    1.0 / g_wt.max(1) as f64
}

/// Computes the WT/NT bits and the category; the target is left unset.
pub fn classify(group: &RolloutGroup) -> DualPathOutcome {
    let wt = group.with_tool.iter().any(Trajectory::is_success);
    let nt = group.no_tool.iter().any(Trajectory::is_success);
    DualPathOutcome {
        question_id: group.question.id,
        wt,
        nt,
        kb: nt,
        category: Category::from_outcomes(wt, nt),
        target: None,
    }
}

fn pick_uniform<'a>(candidates: &[&'a Trajectory], rng: &mut impl Rng) -> Option<&'a Trajectory> {
    match candidates.len() {
        0 => None,
        n => Some(candidates[rng.random_range(0..n)]),
    }
}

/// Chooses the supervision target for a classified group.
pub fn select_target(group: &RolloutGroup, outcome: &DualPathOutcome, rng: &mut impl Rng) -> Option<Trajectory> {
    match outcome.category {
        Category::ToolDependent => {
            let min_tc = group.with_tool.iter().filter(|t| t.is_success()).map(|t| t.tc).min()?;
            let ties: Vec<&Trajectory> = group
                .with_tool
                .iter()
                .filter(|t| t.is_success() && t.tc == min_tc)
                .collect();
            pick_uniform(&ties, rng).cloned()
        }
        Category::Efficiency | Category::Hallucination => {
            let correct: Vec<&Trajectory> = group.no_tool.iter().filter(|t| t.is_success()).collect();
            pick_uniform(&correct, rng).cloned()
        }
        Category::BothWrong => None,
    }
}

/// Classification followed by target selection.
pub fn dual_path_outcome(group: &RolloutGroup, rng: &mut impl Rng) -> DualPathOutcome {
    let mut outcome = classify(group);
    outcome.target = select_target(group, &outcome, rng);
    outcome
}

/// Re-expresses a selected target in the tool-enabled context the policy is
/// trained and deployed in. A no-tool answer keeps its action sequence but is
/// scored with tool calls available, so imitating it also lowers the tool
/// call probability. Step log-probabilities are recomputed under `params`.
pub fn in_tool_context(params: &PolicyParams, target: &Trajectory, world: &World) -> Result<Trajectory> {
    if target.path == RolloutPath::WithTool {
        return Ok(target.clone());
    }
    let mut out = target.clone();
    out.path = RolloutPath::WithTool;
    let ctx = policy::contexts(&out, world)?;
    for (step, c) in out.steps.iter_mut().zip(&ctx) {
        let dist = policy::action_distribution(params, &c.features, c.tool_allowed)?;
        step.log_prob = dist.log_prob(step.action);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub question_id: QuestionId,
    pub target: Trajectory,
    pub category: Category,
}

/// Constructed targets for one batch, at most one per question.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SignalSet {
    pub signals: Vec<Signal>,
}

impl SignalSet {
    pub fn from_outcomes<'a>(outcomes: impl IntoIterator<Item = &'a DualPathOutcome>) -> SignalSet {
        let signals = outcomes
            .into_iter()
            .filter_map(|o| {
                o.target.as_ref().map(|t| Signal {
                    question_id: o.question_id,
                    target: t.clone(),
                    category: o.category,
                })
            })
            .collect();
        SignalSet { signals }
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.signals {
            if !seen.insert(s.question_id) {
                return Err(AkbeError::Contract(format!("two signals for {}", s.question_id)));
            }
            if s.category == Category::BothWrong {
                return Err(AkbeError::Contract(format!("both-wrong signal for {}", s.question_id)));
            }
            if s.target.reward != 1 {
                return Err(AkbeError::Contract(format!(
                    "target for {} has reward {}",
                    s.question_id, s.target.reward
                )));
            }
        }
        Ok(())
    }
}

/// `−Σ log π_θ(y*)` over the signal set (optionally clipped or normalized).
pub fn akbe_loss_and_grad(
    params: &PolicyParams,
    signals: &SignalSet,
    cfg: &AkbeConfig,
    world: &World,
) -> Result<LossGrad> {
    let mut out = LossGrad::zero(params);
    for s in &signals.signals {
        let (lp, grad) = policy::traj_logprob_and_grad(params, &s.target, world)?;
        match cfg.ce_clip {
            None => {
                out.loss -= lp;
                out.grad.add_scaled(-1.0, &grad);
            }
            Some(eps) => {
                // Positive-advantage PPO surrogate: −min(ρ, clip(ρ, 1−ε, 1+ε)).
                let ratio = (lp - s.target.sampled_log_prob()).exp();
                let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
                out.loss -= ratio.min(clipped);
                if ratio <= clipped {
                    out.grad.add_scaled(-ratio, &grad);
                }
            }
        }
    }
    if cfg.normalize_akbe_by_signals && !signals.is_empty() {
        let k = 1.0 / signals.len() as f64;
        out.loss *= k;
        out.grad.scale(k);
    }
    Ok(out)
}

/// `L_total = L_RL + λ · L_aux`.
pub fn total_loss(rl: &LossGrad, aux: &LossGrad, lambda: f64) -> LossGrad {
    let mut out = rl.clone();
    out.loss += lambda * aux.loss;
    out.grad.add_scaled(lambda, &aux.grad);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub preferred: Trajectory,
    pub rejected: Trajectory,
}

/// Rejected trajectory for a preference pair: among with-tool rollouts that
/// are unsuccessful or use more tool calls than the preferred one, the one
/// with the most tool calls (ties uniform).
pub fn select_rejected(group: &RolloutGroup, preferred: &Trajectory, rng: &mut impl Rng) -> Option<Trajectory> {
    let eligible: Vec<&Trajectory> = group
        .with_tool
        .iter()
        .filter(|t| !t.is_success() || t.tc > preferred.tc)
        .collect();
    let max_tc = eligible.iter().map(|t| t.tc).max()?;
    let ties: Vec<&Trajectory> = eligible.into_iter().filter(|t| t.tc == max_tc).collect();
    pick_uniform(&ties, rng).cloned()
}

/// `ln σ(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    -(x.max(0.0) - x + (-x.abs()).exp().ln_1p())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−Σ ln σ(β[(log π_θ(y_w) − log π_ref(y_w)) − (log π_θ(y_l) − log π_ref(y_l))])`.
pub fn dpo_loss_and_grad(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    pairs: &[PreferencePair],
    beta: f64,
    world: &World,
) -> Result<LossGrad> {
    let mut out = LossGrad::zero(params);
    for pair in pairs {
        let (lw, gw) = policy::traj_logprob_and_grad(params, &pair.preferred, world)?;
        let (ll, gl) = policy::traj_logprob_and_grad(params, &pair.rejected, world)?;
        let lw_ref = policy::traj_logprob(ref_params, &pair.preferred, world)?;
        let ll_ref = policy::traj_logprob(ref_params, &pair.rejected, world)?;
        let margin = beta * ((lw - lw_ref) - (ll - ll_ref));
        out.loss -= log_sigmoid(margin);
        // d/dm [−ln σ(m)] = −(1 − σ(m))
        let coeff = -(1.0 - sigmoid(margin)) * beta;
        out.grad.add_scaled(coeff, &gw);
        out.grad.add_scaled(-coeff, &gl);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grpo::final_reward;
    use crate::rng;
    use crate::types::{Action, ObservationKind, QuestionSpec, RolloutPath, Step};

    fn q() -> QuestionSpec {
        QuestionSpec {
            id: QuestionId(3),
            features: vec![1.0, 0.0, 0.5],
            p_param: 0.5,
            hops_required: 1,
            noise_rate: 0.0,
            answer_id: 1,
        }
    }

    fn wt(tc: usize, success: bool) -> Trajectory {
        let mut steps: Vec<Step> = (0..tc)
            .map(|_| Step {
                action: Action::ToolCall,
                observation: Some(ObservationKind::Useful),
                log_prob: -0.2,
            })
            .collect();
        steps.push(Step {
            action: Action::AnswerEvidence,
            observation: None,
            log_prob: -0.3,
        });
        Trajectory {
            question_id: QuestionId(3),
            path: RolloutPath::WithTool,
            steps,
            tc,
            correct: success,
            format_ok: true,
            reward: final_reward(success, true),
        }
    }

    fn nt(success: bool) -> Trajectory {
        Trajectory {
            question_id: QuestionId(3),
            path: RolloutPath::NoTool,
            steps: vec![Step {
                action: Action::AnswerMemory,
                observation: None,
                log_prob: -0.4,
            }],
            tc: 0,
            correct: success,
            format_ok: true,
            reward: final_reward(success, true),
        }
    }

    fn group(with_tool: Vec<Trajectory>, no_tool: Vec<Trajectory>) -> RolloutGroup {
        RolloutGroup {
            question: q(),
            with_tool,
            no_tool,
        }
    }

    #[test]
    fn truth_table() {
        let cases = [
            (true, false, Category::ToolDependent),
            (true, true, Category::Efficiency),
            (false, true, Category::Hallucination),
            (false, false, Category::BothWrong),
        ];
        for (w, n, cat) in cases {
            let g = group(vec![wt(1, w), wt(2, false)], vec![nt(n), nt(false)]);
            let o = classify(&g);
            assert_eq!((o.wt, o.nt, o.kb, o.category), (w, n, n, cat));
        }
    }

    #[test]
    fn format_broken_correct_answer_does_not_count() {
        let mut broken = wt(0, false);
        broken.steps[0].action = Action::Malformed;
        broken.correct = false;
        broken.format_ok = false;
        broken.reward = -1;
        let g = group(vec![broken], vec![nt(false)]);
        assert_eq!(classify(&g).category, Category::BothWrong);
    }

    #[test]
    fn min_tc_target() {
        let g = group(
            vec![wt(3, true), wt(1, true), wt(2, true), wt(0, false)],
            vec![nt(false)],
        );
        let mut rng = rng::stream(0, &[]);
        let o = dual_path_outcome(&g, &mut rng);
        assert_eq!(o.category, Category::ToolDependent);
        assert_eq!(o.target.unwrap().tc, 1);
    }

    #[test]
    fn no_tool_targets_and_both_wrong() {
        let mut rng = rng::stream(0, &[]);
        let g = group(vec![wt(2, true)], vec![nt(false), nt(true)]);
        let o = dual_path_outcome(&g, &mut rng);
        assert_eq!(o.category, Category::Efficiency);
        let t = o.target.unwrap();
        assert_eq!((t.path, t.tc, t.reward), (RolloutPath::NoTool, 0, 1));
        let g = group(vec![wt(2, false)], vec![nt(false)]);
        assert!(dual_path_outcome(&g, &mut rng).target.is_none());
    }

    #[test]
    fn lambda_defaults() {
        assert_eq!(lambda_default(16), 0.0625);
        assert_eq!(lambda_default(8), 0.125);
        assert!((0.05..=0.10).contains(&AkbeConfig::default().lambda));
    }

    #[test]
    fn total_loss_combines_linearly() {
        let p = PolicyParams::zeros(2);
        let mut a = LossGrad::zero(&p);
        a.loss = 0.3;
        a.grad.set(0, 0, 1.0);
        let mut b = LossGrad::zero(&p);
        b.loss = 2.0;
        b.grad.set(0, 0, 4.0);
        let t = total_loss(&a, &b, 0.05);
        assert!((t.loss - 0.4).abs() < 1e-15);
        assert!((t.grad.get(0, 0) - 1.2).abs() < 1e-15);
        assert_eq!(total_loss(&a, &b, 0.0), a);
    }

    #[test]
    fn rejected_selection() {
        let mut rng = rng::stream(0, &[]);
        let g = group(vec![wt(1, true), wt(4, true), wt(2, false), wt(5, false)], vec![]);
        let preferred = wt(1, true);
        assert_eq!(select_rejected(&g, &preferred, &mut rng).unwrap().tc, 5);
        let g = group(vec![wt(1, true), wt(1, true)], vec![]);
        assert!(select_rejected(&g, &preferred, &mut rng).is_none());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + 2f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!((-log_sigmoid(2f64.ln()) - 1.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn signal_set_validation() {
        let mut rng = rng::stream(0, &[]);
        let g = group(vec![wt(1, true)], vec![nt(false)]);
        let o = dual_path_outcome(&g, &mut rng);
        let set = SignalSet::from_outcomes([&o]);
        set.validate().unwrap();
        let dup = SignalSet {
            signals: vec![set.signals[0].clone(), set.signals[0].clone()],
        };
        assert!(dup.validate().is_err());
    }
    #[test]
    fn no_tool_target_is_scored_with_tools_available() {
        let world = World::new(vec![q()], 6, 0.25).unwrap();
        let params = PolicyParams::zeros(policy::full_feature_dim(3));
        let target = in_tool_context(&params, &nt(true), &world).unwrap();
        assert_eq!(target.path, RolloutPath::WithTool);
        assert_eq!(target.tc, 0);
        // Uniform over four actions instead of the three terminal ones.
        assert!((target.sampled_log_prob() - 0.25f64.ln()).abs() < 1e-12);
        let set = SignalSet {
            signals: vec![Signal {
                question_id: QuestionId(3),
                target,
                category: Category::Efficiency,
            }],
        };
        let lg = akbe_loss_and_grad(&params, &set, &AkbeConfig::default(), &world).unwrap();
        // Descending the loss lowers the tool-call logit at the bias feature.
        let bias = policy::full_feature_dim(3) - 1;
        assert!((lg.grad.get(Action::ToolCall.index(), bias) - 0.25).abs() < 1e-12);
        assert!((lg.grad.get(Action::AnswerMemory.index(), bias) + 0.75).abs() < 1e-12);
        let wt_target = wt(2, true);
        assert_eq!(in_tool_context(&params, &wt_target, &world).unwrap(), wt_target);
    }
}
