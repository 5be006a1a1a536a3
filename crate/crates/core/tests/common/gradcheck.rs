//! Analytic gradients against central finite differences. Each check
//! panics on the first mismatch.

use akbe_core::akbe::{self, AkbeConfig, PreferencePair, Signal, SignalSet};
use akbe_core::grpo::{self, group_advantages, GrpoConfig};
use akbe_core::policy::{self, full_feature_dim};
use akbe_core::rng;
use akbe_core::rollout::{rollout_one, Decoding};
use akbe_core::{Category, LossGrad, Matrix, PolicyParams, RolloutPath, Trajectory, World, WorldConfig};
use rand::Rng;
use rand_distr::{Distribution, Normal};

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;
const INSTANCES: u64 = 120;

struct Instance {
    world: World,
    params: PolicyParams,
    old: PolicyParams,
    reference: PolicyParams,
    rng: rand_chacha::ChaCha8Rng,
}

fn perturbed(p: &PolicyParams, scale: f64, rng: &mut impl Rng) -> PolicyParams {
    let noise = Normal::new(0.0, scale).unwrap();
    let mut out = p.clone();
    for w in out.weights.as_mut_slice() {
        *w += noise.sample(rng);
    }
    out
}

fn instance(seed: u64) -> Instance {
    let mut rng = rng::stream(seed, &[0x6772_6164]);
    let n_distractors = rng.random_range(0..=4);
    let max_turns = rng.random_range(2..=5);
    let cfg = WorldConfig {
        n_questions: 12,
        n_distractors,
        seed,
        ..WorldConfig::default()
    };
    let world = World::generate(&cfg, max_turns).unwrap();
    let dim = full_feature_dim(world.feature_dim());
    assert!(dim <= 12);
    let params = PolicyParams::random(dim, 1.0, &mut rng);
    let old = perturbed(&params, 0.3, &mut rng);
    let reference = perturbed(&params, 0.5, &mut rng);
    Instance {
        world,
        params,
        old,
        reference,
        rng,
    }
}

impl Instance {
    fn sample(&mut self, path: RolloutPath) -> Trajectory {
        let idx = self.rng.random_range(0..self.world.len());
        let q = self.world.questions[idx].clone();
        let t = rollout_one(&self.old, &self.world, &q, path, Decoding::Sample, &mut self.rng).unwrap();
        assert!(t.steps.len() <= 6);
        t
    }

    fn group(&mut self, n: usize) -> Vec<Trajectory> {
        let idx = self.rng.random_range(0..self.world.len());
        let q = self.world.questions[idx].clone();
        (0..n)
            .map(|_| {
                rollout_one(
                    &self.old,
                    &self.world,
                    &q,
                    RolloutPath::WithTool,
                    Decoding::Sample,
                    &mut self.rng,
                )
                .unwrap()
            })
            .collect()
    }
}

fn finite_difference(params: &PolicyParams, f: impl Fn(&PolicyParams) -> f64) -> Matrix {
    let mut grad = params.zero_grad();
    let mut p = params.clone();
    for k in 0..p.weights.as_slice().len() {
        let orig = p.weights.as_slice()[k];
        p.weights.as_mut_slice()[k] = orig + H;
        let up = f(&p);
        p.weights.as_mut_slice()[k] = orig - H;
        let down = f(&p);
        p.weights.as_mut_slice()[k] = orig;
        grad.as_mut_slice()[k] = (up - down) / (2.0 * H);
    }
    grad
}

fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff: f64 = analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.norm().max(numeric.norm());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

fn assert_close(label: &str, seed: u64, analytic: &LossGrad, f: impl Fn(&PolicyParams) -> f64, params: &PolicyParams) {
    assert!(
        (f(params) - analytic.loss).abs() <= 1e-12 * analytic.loss.abs().max(1.0),
        "{label}: loss mismatch"
    );
    let numeric = finite_difference(params, f);
    let err = relative_error(&analytic.grad, &numeric);
    assert!(err < TOL, "{label} instance {seed}: relative error {err:e}");
}

pub fn traj_logprob_gradient() {
    for seed in 0..INSTANCES {
        let mut inst = instance(seed);
        let path = if seed % 3 == 0 {
            RolloutPath::NoTool
        } else {
            RolloutPath::WithTool
        };
        let t = inst.sample(path);
        let (lp, grad) = policy::traj_logprob_and_grad(&inst.params, &t, &inst.world).unwrap();
        let lg = LossGrad { loss: lp, grad };
        assert_close(
            "traj_logprob",
            seed,
            &lg,
            |p| policy::traj_logprob(p, &t, &inst.world).unwrap(),
            &inst.params,
        );
    }
}

/// A ratio within this distance of a clip edge makes the objective
/// non-differentiable at the finite-difference scale.
fn near_kink(t: &grpo::SurrogateTerm, eps: f64) -> bool {
    (t.ratio - (1.0 - eps)).abs() < 1e-4 || (t.ratio - (1.0 + eps)).abs() < 1e-4
}

pub fn grpo_check(beta: f64) {
    let cfg = GrpoConfig {
        kl_beta: beta,
        ..GrpoConfig::default()
    };
    let (mut clipped, mut unclipped, mut checked) = (0, 0, 0);
    for seed in 0..INSTANCES {
        let mut inst = instance(1000 + seed);
        let g = inst.rng.random_range(2..=8);
        let group = inst.group(g);
        // Random rewards so advantages are nonzero even for uniform outcomes.
        let rewards: Vec<f64> = (0..g).map(|_| inst.rng.random_range(-1..=1) as f64).collect();
        let adv = group_advantages(&rewards).unwrap();
        let (lg, terms) = grpo::grpo_terms(
            &inst.params,
            &inst.old,
            &inst.reference,
            &group,
            &adv,
            &cfg,
            &inst.world,
        )
        .unwrap();
        if terms.iter().any(|t| near_kink(t, cfg.clip_eps)) {
            continue;
        }
        clipped += terms.iter().filter(|t| t.clipped).count();
        unclipped += terms.iter().filter(|t| !t.clipped).count();
        checked += 1;
        let f = |p: &PolicyParams| {
            grpo::grpo_loss_and_grad(p, &inst.old, &inst.reference, &group, &adv, &cfg, &inst.world)
                .unwrap()
                .loss
        };
        assert_close("grpo", seed, &lg, f, &inst.params);
    }
    assert!(checked >= 100, "only {checked} instances away from clip edges");
    assert!(
        clipped > 0 && unclipped > 0,
        "branches: {clipped} clipped, {unclipped} unclipped"
    );
}

fn signals(inst: &mut Instance) -> SignalSet {
    let n = inst.rng.random_range(0..=4);
    let signals = (0..n)
        .map(|i| {
            let path = if i % 2 == 0 {
                RolloutPath::WithTool
            } else {
                RolloutPath::NoTool
            };
            let t = inst.sample(path);
            let target = akbe::in_tool_context(&inst.old, &t, &inst.world).unwrap();
            Signal {
                question_id: t.question_id,
                target,
                category: Category::Efficiency,
            }
        })
        .collect();
    SignalSet { signals }
}

pub fn akbe_gradient() {
    for seed in 0..INSTANCES {
        let mut inst = instance(2000 + seed);
        let set = signals(&mut inst);
        for cfg in [
            AkbeConfig::default(),
            AkbeConfig {
                normalize_akbe_by_signals: true,
                ..AkbeConfig::default()
            },
        ] {
            let lg = akbe::akbe_loss_and_grad(&inst.params, &set, &cfg, &inst.world).unwrap();
            let f = |p: &PolicyParams| akbe::akbe_loss_and_grad(p, &set, &cfg, &inst.world).unwrap().loss;
            assert_close("akbe", seed, &lg, f, &inst.params);
        }
    }
}

pub fn clipped_ce_gradient() {
    let cfg = AkbeConfig {
        ce_clip: Some(0.2),
        ..AkbeConfig::default()
    };
    let mut checked = 0;
    for seed in 0..INSTANCES + 40 {
        let mut inst = instance(3000 + seed);
        let set = signals(&mut inst);
        let near = set.signals.iter().any(|s| {
            let lp = policy::traj_logprob(&inst.params, &s.target, &inst.world).unwrap();
            let r = (lp - s.target.sampled_log_prob()).exp();
            (r - 0.8).abs() < 1e-4 || (r - 1.2).abs() < 1e-4
        });
        if near {
            continue;
        }
        checked += 1;
        let lg = akbe::akbe_loss_and_grad(&inst.params, &set, &cfg, &inst.world).unwrap();
        let f = |p: &PolicyParams| akbe::akbe_loss_and_grad(p, &set, &cfg, &inst.world).unwrap().loss;
        assert_close("clipped ce", seed, &lg, f, &inst.params);
    }
    assert!(checked >= 100);
}

pub fn total_loss_gradient() {
    let grpo_cfg = GrpoConfig {
        kl_beta: 0.04,
        ..GrpoConfig::default()
    };
    let mut checked = 0;
    for seed in 0..INSTANCES + 40 {
        let mut inst = instance(4000 + seed);
        let g = inst.rng.random_range(2..=8);
        let group = inst.group(g);
        let rewards: Vec<f64> = group.iter().map(|t| f64::from(t.reward)).collect();
        let adv = group_advantages(&rewards).unwrap();
        let set = signals(&mut inst);
        let lambda = inst.rng.random_range(0.0..1.0);
        let total = |p: &PolicyParams| {
            let rl =
                grpo::grpo_loss_and_grad(p, &inst.old, &inst.reference, &group, &adv, &grpo_cfg, &inst.world).unwrap();
            let aux = akbe::akbe_loss_and_grad(p, &set, &AkbeConfig::default(), &inst.world).unwrap();
            akbe::total_loss(&rl, &aux, lambda)
        };
        let (_, terms) = grpo::grpo_terms(
            &inst.params,
            &inst.old,
            &inst.reference,
            &group,
            &adv,
            &grpo_cfg,
            &inst.world,
        )
        .unwrap();
        if terms.iter().any(|t| near_kink(t, grpo_cfg.clip_eps)) {
            continue;
        }
        checked += 1;
        let lg = total(&inst.params);
        assert_close("total", seed, &lg, |p| total(p).loss, &inst.params);
    }
    assert!(checked >= 100);
}

pub fn dpo_gradient() {
    for seed in 0..INSTANCES {
        let mut inst = instance(5000 + seed);
        let n = inst.rng.random_range(1..=3);
        let pairs: Vec<PreferencePair> = (0..n)
            .map(|_| {
                let preferred = inst.sample(RolloutPath::WithTool);
                let rejected = inst.sample(RolloutPath::WithTool);
                PreferencePair { preferred, rejected }
            })
            .collect();
        let beta = inst.rng.random_range(0.05..2.0);
        let lg = akbe::dpo_loss_and_grad(&inst.params, &inst.reference, &pairs, beta, &inst.world).unwrap();
        let f = |p: &PolicyParams| {
            akbe::dpo_loss_and_grad(p, &inst.reference, &pairs, beta, &inst.world)
                .unwrap()
                .loss
        };
        assert_close("dpo", seed, &lg, f, &inst.params);
    }
}

/// Runs every check.
pub fn all() {
    traj_logprob_gradient();
    grpo_check(0.0);
    grpo_check(0.04);
    akbe_gradient();
    clipped_ce_gradient();
    total_loss_gradient();
    dpo_gradient();
}
