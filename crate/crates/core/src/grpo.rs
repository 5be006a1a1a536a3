//! Outcome rewards, group-relative advantages and the clipped GRPO surrogate
//! with an exact categorical KL penalty.

use serde::{Deserialize, Serialize};

use crate::env::World;
use crate::error::{AkbeError, Result};
use crate::policy::{self, action_distribution, Gradient, PolicyParams, ReplayStep};
use crate::types::{Action, Trajectory};

/// Exact-match reward: the judge bit itself.
pub fn em_reward(correct: bool) -> i8 {
    i8::from(correct)
}

/// 1 unless the trajectory ends in a malformed answer.
pub fn format_indicator(traj: &Trajectory) -> i8 {
    i8::from(traj.terminal_action() != Some(Action::Malformed))
}

/// EM reward when the format is valid, −1 otherwise.
pub fn final_reward(correct: bool, format_ok: bool) -> i8 {
    if format_ok {
        em_reward(correct)
    } else {
        -1
    }
}

/// Tool-count–penalized reward used by the shaped-reward baseline: a correct
/// answer earns `1 / (1 + alpha·tc)`; non-positive rewards are unchanged.
pub fn otc_shaped_reward(traj: &Trajectory, alpha: f64) -> f64 {
    let r = f64::from(traj.reward);
    if traj.reward == 1 {
        r / (1.0 + alpha * traj.tc as f64)
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    #[default]
    Standard,
    OtcShaped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    /// Clip threshold ε.
    pub clip_eps: f64,
    /// KL coefficient β.
    pub kl_beta: f64,
    pub reward_mode: RewardMode,
    pub otc_alpha: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            clip_eps: 0.2,
            kl_beta: 0.0,
            reward_mode: RewardMode::Standard,
            otc_alpha: 1.0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_eps.is_nan() || self.clip_eps <= 0.0 {
            return Err(AkbeError::Config("clip_eps must be positive".into()));
        }
        if self.kl_beta.is_nan() || self.kl_beta < 0.0 {
            return Err(AkbeError::Config("kl_beta must be nonnegative".into()));
        }
        if self.otc_alpha.is_nan() || self.otc_alpha <= 0.0 {
            return Err(AkbeError::Config("otc_alpha must be positive".into()));
        }
        Ok(())
    }

    /// Scalar reward fed to the advantage computation.
    pub fn reward_of(&self, traj: &Trajectory) -> f64 {
        match self.reward_mode {
            RewardMode::Standard => f64::from(traj.reward),
            RewardMode::OtcShaped => otc_shaped_reward(traj, self.otc_alpha),
        }
    }
}

/// Group-relative advantages, aligned with a group's with-tool list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet(pub Vec<f64>);

impl AdvantageSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `(r − mean) / std` with the population standard deviation. A group with
/// identical rewards gets all-zero advantages.
pub fn group_advantages(rewards: &[f64]) -> Result<AdvantageSet> {
    if rewards.len() < 2 {
        return Err(AkbeError::Config(format!(
            "advantages need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(AdvantageSet(vec![0.0; rewards.len()]));
    }
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(AdvantageSet(rewards.iter().map(|r| (r - mean) / std).collect()))
}

/// `π_θ(y) / π_old(y)`.
pub fn importance_ratio(
    params: &PolicyParams,
    old_params: &PolicyParams,
    traj: &Trajectory,
    world: &World,
) -> Result<f64> {
    let ctx = policy::contexts(traj, world)?;
    Ok((policy::logprob_over(params, &ctx)? - policy::logprob_over(old_params, &ctx)?).exp())
}

/// `D(p ‖ q)` over the shared support.
pub fn categorical_kl(p: &[f64; Action::COUNT], q: &[f64; Action::COUNT], allowed: &[bool; Action::COUNT]) -> f64 {
    (0..Action::COUNT)
        .filter(|&a| allowed[a] && p[a] > 0.0)
        .map(|a| p[a] * (p[a].ln() - q[a].ln()))
        .sum()
}

/// Sum of per-step `D(π_θ(·|c_t) ‖ π_ref(·|c_t))` over a trajectory.
pub fn kl_divergence(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    traj: &Trajectory,
    world: &World,
) -> Result<f64> {
    let ctx = policy::contexts(traj, world)?;
    Ok(kl_and_grad_over(params, ref_params, &ctx, false)?.0)
}

fn kl_and_grad_over(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    ctx: &[ReplayStep],
    with_grad: bool,
) -> Result<(f64, Option<Gradient>)> {
    let mut total = 0.0;
    let mut grad = with_grad.then(|| params.zero_grad());
    for step in ctx {
        let p = action_distribution(params, &step.features, step.tool_allowed)?;
        let q = action_distribution(ref_params, &step.features, step.tool_allowed)?;
        let kl = categorical_kl(&p.probs, &q.probs, &p.allowed);
        total += kl;
        if let Some(g) = grad.as_mut() {
            // ∂KL/∂z_k = p_k (ln p_k − ln q_k − KL)
            for a in 0..Action::COUNT {
                if p.allowed[a] && p.probs[a] > 0.0 {
                    let coeff = p.probs[a] * (p.probs[a].ln() - q.probs[a].ln() - kl);
                    g.add_row_scaled(a, coeff, step.features.as_slice());
                }
            }
        }
    }
    Ok((total, grad))
}

/// A loss value with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Gradient,
}

impl LossGrad {
    pub fn zero(params: &PolicyParams) -> LossGrad {
        LossGrad {
            loss: 0.0,
            grad: params.zero_grad(),
        }
    }

    pub fn accumulate(&mut self, other: &LossGrad, weight: f64) {
        self.loss += weight * other.loss;
        self.grad.add_scaled(weight, &other.grad);
    }
}

/// Per-trajectory diagnostics of the surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateTerm {
    pub ratio: f64,
    pub clipped: bool,
    pub kl: f64,
}

/// Clipped GRPO loss for one question's with-tool group:
/// `−(1/G) Σ_i [min(r_i Â_i, clip(r_i, 1−ε, 1+ε) Â_i) − β KL_i]`.
pub fn grpo_loss_and_grad(
    params: &PolicyParams,
    old_params: &PolicyParams,
    ref_params: &PolicyParams,
    with_tool: &[Trajectory],
    advantages: &AdvantageSet,
    cfg: &GrpoConfig,
    world: &World,
) -> Result<LossGrad> {
    Ok(grpo_terms(params, old_params, ref_params, with_tool, advantages, cfg, world)?.0)
}

pub fn grpo_terms(
    params: &PolicyParams,
    old_params: &PolicyParams,
    ref_params: &PolicyParams,
    with_tool: &[Trajectory],
    advantages: &AdvantageSet,
    cfg: &GrpoConfig,
    world: &World,
) -> Result<(LossGrad, Vec<SurrogateTerm>)> {
    if advantages.len() != with_tool.len() {
        return Err(AkbeError::Contract(format!(
            "{} advantages for {} trajectories",
            advantages.len(),
            with_tool.len()
        )));
    }
    let mut out = LossGrad::zero(params);
    let mut terms = Vec::with_capacity(with_tool.len());
    if with_tool.is_empty() {
        return Ok((out, terms));
    }
    let g = with_tool.len() as f64;
    let (lo, hi) = (1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    for (traj, &adv) in with_tool.iter().zip(&advantages.0) {
        let ctx = policy::contexts(traj, world)?;
        let (lp, lp_grad) = policy::logprob_and_grad_over(params, &ctx)?;
        let lp_old = policy::logprob_over(old_params, &ctx)?;
        let ratio = (lp - lp_old).exp();
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(lo, hi) * adv;
        let surrogate = unclipped.min(clipped);
        // The clipped branch has zero gradient; it is selected only when the
        // clip is active.
        let use_unclipped = unclipped <= clipped;
        if use_unclipped && adv != 0.0 {
            out.grad.add_scaled(-adv * ratio / g, &lp_grad);
        }
        let mut kl = 0.0;
        if cfg.kl_beta > 0.0 {
            let (k, kg) = kl_and_grad_over(params, ref_params, &ctx, true)?;
            kl = k;
            out.grad.add_scaled(cfg.kl_beta / g, &kg.expect("requested"));
        }
        out.loss -= (surrogate - cfg.kl_beta * kl) / g;
        terms.push(SurrogateTerm {
            ratio,
            clipped: !use_unclipped,
            kl,
        });
    }
    Ok((out, terms))
}

/// Pluggable RL loss over one question's with-tool group. The boundary-guided
/// term is added on top of whatever implements this.
pub trait RlLoss: Send + Sync {
    #[allow(clippy::too_many_arguments)]
    fn loss_and_grad(
        &self,
        params: &PolicyParams,
        old_params: &PolicyParams,
        ref_params: &PolicyParams,
        with_tool: &[Trajectory],
        advantages: &AdvantageSet,
        world: &World,
    ) -> Result<LossGrad>;
}

#[derive(Debug, Clone, Copy)]
pub struct Grpo(pub GrpoConfig);

impl RlLoss for Grpo {
    fn loss_and_grad(
        &self,
        params: &PolicyParams,
        old_params: &PolicyParams,
        ref_params: &PolicyParams,
        with_tool: &[Trajectory],
        advantages: &AdvantageSet,
        world: &World,
    ) -> Result<LossGrad> {
        grpo_loss_and_grad(params, old_params, ref_params, with_tool, advantages, &self.0, world)
    }
}
