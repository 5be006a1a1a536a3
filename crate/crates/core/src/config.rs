use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::akbe::AkbeConfig;
use crate::env::WorldConfig;
use crate::error::{AkbeError, Result};
use crate::grpo::{GrpoConfig, RewardMode};
use crate::rollout::RolloutBudget;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain GRPO on the with-tool path.
    Grpo,
    /// GRPO plus the boundary-guided cross-entropy term.
    Akbe,
    /// GRPO on tool-count–shaped rewards.
    Otc,
    /// GRPO plus a preference loss over (target, rejected) pairs.
    AkbeDpo,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Grpo, Method::Akbe, Method::Otc, Method::AkbeDpo];

    pub fn uses_signals(self) -> bool {
        matches!(self, Method::Akbe | Method::AkbeDpo)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Grpo => "grpo",
            Method::Akbe => "akbe",
            Method::Otc => "otc",
            Method::AkbeDpo => "akbe_dpo",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Method, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?} (expected grpo, akbe, otc or akbe_dpo)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalDecoding {
    #[default]
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eval_every: usize,
    /// Size of the held-out evaluation world.
    pub eval_questions: usize,
    pub eval_decoding: EvalDecoding,
    /// Standard deviation of the initial policy weights.
    pub init_scale: f64,
    /// Number of gradient updates per batch against the same rollouts.
    pub updates_per_batch: usize,
    /// After this step, reuse the last constructed target per question
    /// instead of re-probing the boundary.
    pub freeze_signals_after: Option<usize>,
    /// Also run (untrained-on) no-tool rollouts for methods that do not
    /// need them, so category distributions are comparable across methods.
    pub probe_boundary: bool,
    pub cost_per_tool: f64,
    pub cost_per_step: f64,
    pub world: WorldConfig,
    pub budget: RolloutBudget,
    pub grpo: GrpoConfig,
    pub akbe: AkbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Akbe,
            seed: 0,
            steps: 300,
            batch_size: 16,
            learning_rate: 0.02,
            eval_every: 10,
            eval_questions: 1000,
            eval_decoding: EvalDecoding::Greedy,
            init_scale: 0.01,
            updates_per_batch: 1,
            freeze_signals_after: None,
            probe_boundary: true,
            cost_per_tool: 5.0,
            cost_per_step: 1.0,
            world: WorldConfig::default(),
            budget: RolloutBudget {
                g_wt: 8,
                g_nt: 4,
                max_turns: 6,
            },
            grpo: GrpoConfig::default(),
            akbe: AkbeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(AkbeError::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 || self.batch_size > self.world.n_questions {
            return Err(AkbeError::Config(format!(
                "batch_size {} must be in 1..={}",
                self.batch_size, self.world.n_questions
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(AkbeError::Config("learning_rate must be positive".into()));
        }
        if self.eval_every == 0 || self.eval_questions == 0 {
            return Err(AkbeError::Config(
                "eval_every and eval_questions must be positive".into(),
            ));
        }
        if self.updates_per_batch == 0 {
            return Err(AkbeError::Config("updates_per_batch must be at least 1".into()));
        }
        if [self.init_scale, self.cost_per_tool, self.cost_per_step]
            .iter()
            .any(|v| v.is_nan() || *v < 0.0)
        {
            return Err(AkbeError::Config("init_scale and costs must be nonnegative".into()));
        }
        if self.budget.g_wt < 2 {
            return Err(AkbeError::Config("group advantages need g_wt >= 2".into()));
        }
        self.budget.validate()?;
        self.world.validate(self.budget.max_turns)?;
        self.grpo.validate()?;
        self.akbe.validate()?;
        Ok(())
    }

    /// Reward mode actually used for advantages under this method.
    pub fn reward_mode(&self) -> RewardMode {
        match self.method {
            Method::Otc => RewardMode::OtcShaped,
            _ => self.grpo.reward_mode,
        }
    }

    pub fn effective_grpo(&self) -> GrpoConfig {
        GrpoConfig {
            reward_mode: self.reward_mode(),
            ..self.grpo
        }
    }

    pub fn runs_no_tool(&self) -> bool {
        self.method.uses_signals() || self.probe_boundary
    }

    pub fn from_toml_str(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| AkbeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| AkbeError::io(path, e))?;
        TrainConfig::from_toml_str(&text).map_err(|e| AkbeError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = TrainConfig {
            freeze_signals_after: Some(12),
            ..TrainConfig::default()
        };
        let text = cfg.to_toml_string();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg = TrainConfig::from_toml_str("method = \"grpo\"\nsteps = 5\n[akbe]\nlambda = 0.2\n").unwrap();
        assert_eq!(cfg.method, Method::Grpo);
        assert_eq!(cfg.steps, 5);
        assert_eq!(cfg.akbe.lambda, 0.2);
        assert_eq!(cfg.batch_size, 16);
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainConfig::from_toml_str("steps = 0").is_err());
        assert!(TrainConfig::from_toml_str("batch_size = 100000").is_err());
        assert!(TrainConfig::from_toml_str("[world]\nfrac_noise_prone = 0.5").is_err());
        assert!(TrainConfig::from_toml_str("method = \"ppo\"").is_err());
    }
}
