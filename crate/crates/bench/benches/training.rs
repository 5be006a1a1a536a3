use std::hint::black_box;

use akbe_bench::fixture;
use akbe_core::akbe::{self, AkbeConfig, Signal, SignalSet};
use akbe_core::grpo::{self, group_advantages};
use akbe_core::policy;
use akbe_core::rollout::{self, RolloutKey};
use akbe_core::train::{self, SignalCache};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;

fn rollouts(c: &mut Criterion) {
    let f = fixture();
    let q = &f.world.questions[0];
    let mut step = 0u64;
    c.bench_function("dual_path_rollout", |b| {
        b.iter(|| {
            step += 1;
            let key = RolloutKey { seed: 0, step };
            black_box(rollout::run_dual_path(&f.params, &f.world, q, &f.cfg.budget, key, false).unwrap())
        })
    });
}

fn losses(c: &mut Criterion) {
    let f = fixture();
    let grpo_cfg = f.cfg.effective_grpo();
    let group = &f.groups[0];
    let rewards: Vec<f64> = group.with_tool.iter().map(|t| grpo_cfg.reward_of(t)).collect();
    let adv = group_advantages(&rewards).unwrap();
    c.bench_function("traj_logprob_and_grad", |b| {
        b.iter(|| black_box(policy::traj_logprob_and_grad(&f.params, &group.with_tool[0], &f.world).unwrap()))
    });
    c.bench_function("grpo_loss_and_grad", |b| {
        b.iter(|| {
            black_box(
                grpo::grpo_loss_and_grad(
                    &f.params,
                    &f.params,
                    &f.params,
                    &group.with_tool,
                    &adv,
                    &grpo_cfg,
                    &f.world,
                )
                .unwrap(),
            )
        })
    });

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let signals = SignalSet {
        signals: f
            .groups
            .iter()
            .filter_map(|g| {
                let o = akbe::dual_path_outcome(g, &mut rng);
                let target = akbe::in_tool_context(&f.params, o.target.as_ref()?, &f.world).unwrap();
                Some(Signal {
                    question_id: g.question.id,
                    target,
                    category: o.category,
                })
            })
            .collect(),
    };
    c.bench_function("akbe_loss_and_grad_batch", |b| {
        b.iter(|| black_box(akbe::akbe_loss_and_grad(&f.params, &signals, &AkbeConfig::default(), &f.world).unwrap()))
    });
}

fn steps(c: &mut Criterion) {
    let f = fixture();
    let batch = &f.world.questions[..f.cfg.batch_size];
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    group.bench_function("akbe", |b| {
        let mut cache = SignalCache::default();
        b.iter(|| black_box(train::train_step(&f.params, &f.params, &f.world, batch, &f.cfg, 1, &mut cache).unwrap()))
    });
    group.bench_function("evaluate_1000", |b| {
        b.iter(|| black_box(train::evaluate(&f.params, &f.eval_world, &f.cfg, 0).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, rollouts, losses, steps);
criterion_main!(benches);
