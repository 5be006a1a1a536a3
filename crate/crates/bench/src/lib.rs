//! Shared fixtures for the benchmarks.

use akbe_core::rollout::{self, RolloutKey};
use akbe_core::train::{build_worlds, initial_params};
use akbe_core::{PolicyParams, RolloutGroup, TrainConfig, World};

pub struct Fixture {
    pub cfg: TrainConfig,
    pub world: World,
    pub eval_world: World,
    pub params: PolicyParams,
    pub groups: Vec<RolloutGroup>,
}

/// Default config with `init_scale` raised so rollouts take a mix of actions.
pub fn fixture() -> Fixture {
    let cfg = TrainConfig {
        init_scale: 0.5,
        ..TrainConfig::default()
    };
    let (world, eval_world) = build_worlds(&cfg).expect("default config is valid");
    let params = initial_params(&cfg, &world);
    let key = RolloutKey {
        seed: cfg.seed,
        step: 1,
    };
    let groups = world.questions[..cfg.batch_size]
        .iter()
        .map(|q| rollout::run_dual_path(&params, &world, q, &cfg.budget, key, false).expect("rollouts succeed"))
        .collect();
    Fixture {
        cfg,
        world,
        eval_world,
        params,
        groups,
    }
}
