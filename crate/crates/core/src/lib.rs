//! Boundary-aware agentic policy training on a synthetic tool-use world.
//!
//! A linear-softmax policy answers questions either from parametric memory or
//! after gathering evidence with tool calls. Training compares a with-tool and
//! a no-tool rollout path per question and adds a cross-entropy signal toward
//! the cheapest successful behaviour on top of group-relative policy
//! optimization.

pub mod akbe;
pub mod config;
pub mod env;
pub mod error;
pub mod experiments;
pub mod grpo;
pub mod metrics;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod train;
pub mod types;

pub use akbe::{AkbeConfig, AkbeVariant, PreferencePair, Signal, SignalSet};
pub use config::{EvalDecoding, Method, TrainConfig};
pub use env::{EnvState, Stratum, StratumConfig, World, WorldConfig};
pub use error::{AkbeError, Result};
pub use grpo::{AdvantageSet, GrpoConfig, LossGrad, RewardMode};
pub use metrics::{MetricsRecord, Phase, Tp};
pub use policy::{ActionDistribution, FeatureVector, Gradient, Matrix, PolicyParams};
pub use rollout::{Decoding, RolloutBudget, RolloutKey};
pub use types::{
    Action, Category, DualPathOutcome, ObservationKind, QuestionId, QuestionSpec, RolloutGroup, RolloutPath, Step,
    Trajectory,
};
