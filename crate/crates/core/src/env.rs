//! Synthetic tool environment: world generation with controllable knowledge
//! boundaries, tool-call transitions and answer judging.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{AkbeError, Result};
use crate::rng::{self, tag};
use crate::types::{Action, ObservationKind, QuestionId, QuestionSpec};

/// Environment-visible summary of the context so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
pub struct EnvState {
    pub useful_hops: usize,
    pub misleading_count: usize,
    pub turn: usize,
}

impl EnvState {
    pub fn has_sufficient_evidence(&self, q: &QuestionSpec) -> bool {
        self.useful_hops >= q.hops_required
    }
}

/// Parameter ranges for one question stratum. `hop_weights[k]` is the
/// relative weight of `k + 1` required hops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumConfig {
    pub p_param: [f64; 2],
    pub noise_rate: [f64; 2],
    pub hop_weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    MemoryEasy,
    ToolDependent,
    NoiseProne,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::MemoryEasy, Stratum::ToolDependent, Stratum::NoiseProne];

    /// Recovers the stratum from the first two question-feature components.
    pub fn from_features(features: &[f64]) -> Stratum {
        match (features[0] > 0.5, features[1] > 0.5) {
            (_, true) => Stratum::NoiseProne,
            (true, false) => Stratum::MemoryEasy,
            (false, false) => Stratum::ToolDependent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_questions: usize,
    pub frac_memory_easy: f64,
    pub frac_tool_dependent: f64,
    pub frac_noise_prone: f64,
    pub memory_easy: StratumConfig,
    pub tool_dependent: StratumConfig,
    pub noise_prone: StratumConfig,
    /// Number of seeded nuisance feature dimensions appended to each question.
    pub n_distractors: usize,
    pub distractor_scale: f64,
    /// Survival factor of an evidence answer per misleading observation.
    pub eta_poison: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_questions: 600,
            frac_memory_easy: 0.4,
            frac_tool_dependent: 0.4,
            frac_noise_prone: 0.2,
            memory_easy: StratumConfig {
                p_param: [0.95, 1.0],
                noise_rate: [0.0, 0.1],
                hop_weights: vec![1.0],
            },
            tool_dependent: StratumConfig {
                p_param: [0.0, 0.25],
                noise_rate: [0.0, 0.05],
                hop_weights: vec![1.0, 1.0],
            },
            noise_prone: StratumConfig {
                p_param: [0.8, 0.95],
                noise_rate: [0.6, 0.9],
                hop_weights: vec![1.0],
            },
            n_distractors: 3,
            distractor_scale: 0.5,
            eta_poison: 0.25,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// Question feature dimension: stratum indicators, normalized hops,
    /// distractors.
    pub fn feature_dim(&self) -> usize {
        3 + self.n_distractors
    }

    fn stratum(&self, s: Stratum) -> &StratumConfig {
        match s {
            Stratum::MemoryEasy => &self.memory_easy,
            Stratum::ToolDependent => &self.tool_dependent,
            Stratum::NoiseProne => &self.noise_prone,
        }
    }

    pub fn validate(&self, max_turns: usize) -> Result<()> {
        let fr = [self.frac_memory_easy, self.frac_tool_dependent, self.frac_noise_prone];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(AkbeError::Config("mixture fractions must lie in [0, 1]".into()));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(AkbeError::Config(format!(
                "mixture fractions sum to {}, expected 1",
                fr.iter().sum::<f64>()
            )));
        }
        if self.n_questions == 0 {
            return Err(AkbeError::Config("n_questions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eta_poison) {
            return Err(AkbeError::Config("eta_poison must lie in [0, 1]".into()));
        }
        for s in Stratum::ALL {
            let c = self.stratum(s);
            for (name, r) in [("p_param", c.p_param), ("noise_rate", c.noise_rate)] {
                if !(0.0 <= r[0] && r[0] <= r[1] && r[1] <= 1.0) {
                    return Err(AkbeError::Config(format!("{s:?}: invalid {name} range {r:?}")));
                }
            }
            if c.hop_weights.is_empty()
                || c.hop_weights.len() > max_turns
                || c.hop_weights.iter().any(|w| w.is_nan() || *w < 0.0)
                || c.hop_weights.iter().sum::<f64>() <= 0.0
            {
                return Err(AkbeError::Config(format!(
                    "{s:?}: hop_weights must be nonnegative, non-zero and cover at most {max_turns} hops"
                )));
            }
        }
        Ok(())
    }
}

/// Apportions `n` items to `fractions` by largest remainder; ties go to the
/// earlier entry.
pub fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Generates a world. Questions are laid out stratum by stratum with ids
/// `0..n`; identical configs give identical worlds.
pub fn generate_world(cfg: &WorldConfig, max_turns: usize) -> Result<Vec<QuestionSpec>> {
    cfg.validate(max_turns)?;
    let counts = largest_remainder(
        cfg.n_questions,
        &[cfg.frac_memory_easy, cfg.frac_tool_dependent, cfg.frac_noise_prone],
    );
    let mut rng = rng::stream(cfg.seed, &[tag::WORLD]);
    let distractor = Normal::new(0.0, cfg.distractor_scale.max(0.0))
        .map_err(|e| AkbeError::Config(format!("distractor_scale: {e}")))?;
    let mut out = Vec::with_capacity(cfg.n_questions);
    for (stratum, &count) in Stratum::ALL.iter().zip(&counts) {
        let sc = cfg.stratum(*stratum);
        let total_w: f64 = sc.hop_weights.iter().sum();
        for _ in 0..count {
            let id = QuestionId(out.len() as u64);
            let p_param = uniform_in(&mut rng, sc.p_param);
            let noise_rate = uniform_in(&mut rng, sc.noise_rate);
            let mut u = rng.random::<f64>() * total_w;
            let mut hops_required = sc.hop_weights.len();
            for (k, w) in sc.hop_weights.iter().enumerate() {
                if u < *w {
                    hops_required = k + 1;
                    break;
                }
                u -= w;
            }
            let mut features = Vec::with_capacity(cfg.feature_dim());
            features.push(if *stratum == Stratum::ToolDependent { 0.0 } else { 1.0 });
            features.push(if *stratum == Stratum::NoiseProne { 1.0 } else { 0.0 });
            features.push(hops_required as f64 / max_turns as f64);
            for _ in 0..cfg.n_distractors {
                features.push(distractor.sample(&mut rng));
            }
            out.push(QuestionSpec {
                id,
                features,
                p_param,
                hops_required,
                noise_rate,
                answer_id: rng.random::<u64>(),
            });
        }
    }
    Ok(out)
}

fn uniform_in(rng: &mut impl Rng, range: [f64; 2]) -> f64 {
    range[0] + (range[1] - range[0]) * rng.random::<f64>()
}

fn bernoulli(rng: &mut impl Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// Applies a tool call: one retrieval that is useful with probability
/// `1 - noise_rate`.
pub fn env_transition(
    q: &QuestionSpec,
    s: EnvState,
    a: Action,
    max_turns: usize,
    rng: &mut impl Rng,
) -> Result<(Option<ObservationKind>, EnvState)> {
    if a.is_terminal() {
        return Err(AkbeError::Contract(format!(
            "env_transition called with terminal action {a:?}"
        )));
    }
    if s.turn >= max_turns {
        return Err(AkbeError::Budget {
            turn: s.turn,
            max_turns,
        });
    }
    let mut next = s;
    next.turn += 1;
    let obs = if bernoulli(rng, 1.0 - q.noise_rate) {
        next.useful_hops += 1;
        ObservationKind::Useful
    } else {
        next.misleading_count += 1;
        ObservationKind::Misleading
    };
    Ok((Some(obs), next))
}

/// Judges a terminal action. Evidence answers need enough useful hops and
/// survive each misleading observation with probability `eta_poison`.
pub fn judge(q: &QuestionSpec, s: &EnvState, terminal: Action, eta_poison: f64, rng: &mut impl Rng) -> Result<bool> {
    match terminal {
        Action::ToolCall => Err(AkbeError::Contract("judge called with a tool call".into())),
        Action::AnswerMemory => Ok(bernoulli(rng, q.p_param)),
        Action::AnswerEvidence => {
            if !s.has_sufficient_evidence(q) {
                Ok(false)
            } else if s.misleading_count == 0 {
                Ok(true)
            } else {
                Ok(bernoulli(rng, eta_poison.powi(s.misleading_count as i32)))
            }
        }
        Action::Malformed => Ok(false),
    }
}

/// A generated world plus its environment constants.
#[derive(Debug, Clone)]
pub struct World {
    pub questions: Vec<QuestionSpec>,
    pub max_turns: usize,
    pub eta_poison: f64,
    index: HashMap<QuestionId, usize>,
}

impl World {
    pub fn new(questions: Vec<QuestionSpec>, max_turns: usize, eta_poison: f64) -> Result<World> {
        let mut index = HashMap::with_capacity(questions.len());
        for (i, q) in questions.iter().enumerate() {
            q.validate(max_turns).map_err(AkbeError::Config)?;
            if index.insert(q.id, i).is_some() {
                return Err(AkbeError::Config(format!("duplicate question id {}", q.id)));
            }
        }
        if let Some(first) = questions.first() {
            if questions.iter().any(|q| q.features.len() != first.features.len()) {
                return Err(AkbeError::Config("questions disagree on feature dimension".into()));
            }
        }
        Ok(World {
            questions,
            max_turns,
            eta_poison,
            index,
        })
    }

    pub fn generate(cfg: &WorldConfig, max_turns: usize) -> Result<World> {
        World::new(generate_world(cfg, max_turns)?, max_turns, cfg.eta_poison)
    }

    pub fn get(&self, id: QuestionId) -> Result<&QuestionSpec> {
        self.index
            .get(&id)
            .map(|&i| &self.questions[i])
            .ok_or_else(|| AkbeError::Data(format!("unknown question id {id}")))
    }

    pub fn feature_dim(&self) -> usize {
        self.questions.first().map_or(0, |q| q.features.len())
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    /// Writes one `QuestionSpec` JSON object per line.
    pub fn export_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| AkbeError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for q in &self.questions {
            let line = serde_json::to_string(q).expect("question serializes");
            writeln!(w, "{line}").map_err(|e| AkbeError::io(path, e))?;
        }
        w.flush().map_err(|e| AkbeError::io(path, e))
    }

    pub fn import_jsonl(path: &Path, max_turns: usize, eta_poison: f64) -> Result<World> {
        let file = std::fs::File::open(path).map_err(|e| AkbeError::io(path, e))?;
        let mut questions = Vec::new();
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| AkbeError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let q: QuestionSpec = serde_json::from_str(&line)
                .map_err(|e| AkbeError::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            questions.push(q);
        }
        World::new(questions, max_turns, eta_poison)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(p_param: f64, hops: usize, noise: f64) -> QuestionSpec {
        QuestionSpec {
            id: QuestionId(0),
            features: vec![0.0; 4],
            p_param,
            hops_required: hops,
            noise_rate: noise,
            answer_id: 0,
        }
    }

    #[test]
    fn even_split_without_rounding() {
        let cfg = WorldConfig {
            n_questions: 10,
            frac_memory_easy: 0.5,
            frac_tool_dependent: 0.5,
            frac_noise_prone: 0.0,
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg, 6).unwrap();
        let strata: Vec<Stratum> = w.iter().map(|q| Stratum::from_features(&q.features)).collect();
        assert_eq!(strata.iter().filter(|s| **s == Stratum::MemoryEasy).count(), 5);
        assert_eq!(strata.iter().filter(|s| **s == Stratum::ToolDependent).count(), 5);
    }

    #[test]
    fn stratum_counts_follow_largest_remainder() {
        // Oracle: floor quotas, then hand out the leftover to the largest
        // fractional parts.
        assert_eq!(largest_remainder(100, &[0.3, 0.5, 0.2]), vec![30, 50, 20]);
        assert_eq!(largest_remainder(10, &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]), vec![4, 3, 3]);
        assert_eq!(largest_remainder(7, &[0.5, 0.25, 0.25]), vec![3, 2, 2]);
        let cfg = WorldConfig {
            n_questions: 100,
            frac_memory_easy: 0.3,
            frac_tool_dependent: 0.5,
            frac_noise_prone: 0.2,
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg, 6).unwrap();
        let count = |s| w.iter().filter(|q| Stratum::from_features(&q.features) == s).count();
        assert_eq!(
            (
                count(Stratum::MemoryEasy),
                count(Stratum::ToolDependent),
                count(Stratum::NoiseProne)
            ),
            (30, 50, 20)
        );
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = WorldConfig::default();
        assert_eq!(generate_world(&cfg, 6).unwrap(), generate_world(&cfg, 6).unwrap());
        let other = WorldConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_world(&cfg, 6).unwrap(), generate_world(&other, 6).unwrap());
    }

    #[test]
    fn rejects_bad_fractions() {
        let cfg = WorldConfig {
            frac_noise_prone: 0.3,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(&cfg, 6), Err(AkbeError::Config(_))));
    }

    #[test]
    fn degenerate_transitions() {
        let mut rng = rng::stream(1, &[]);
        let s = EnvState::default();
        let (o, s1) = env_transition(&q(0.0, 1, 0.0), s, Action::ToolCall, 6, &mut rng).unwrap();
        assert_eq!(o, Some(ObservationKind::Useful));
        assert_eq!((s1.useful_hops, s1.misleading_count, s1.turn), (1, 0, 1));
        let (o, s1) = env_transition(&q(0.0, 1, 1.0), s, Action::ToolCall, 6, &mut rng).unwrap();
        assert_eq!(o, Some(ObservationKind::Misleading));
        assert_eq!((s1.useful_hops, s1.misleading_count, s1.turn), (0, 1, 1));
    }

    #[test]
    fn transition_errors() {
        let mut rng = rng::stream(1, &[]);
        let s = EnvState::default();
        assert!(matches!(
            env_transition(&q(0.0, 1, 0.0), s, Action::AnswerMemory, 6, &mut rng),
            Err(AkbeError::Contract(_))
        ));
        let full = EnvState { turn: 6, ..s };
        assert!(matches!(
            env_transition(&q(0.0, 1, 0.0), full, Action::ToolCall, 6, &mut rng),
            Err(AkbeError::Budget { .. })
        ));
    }

    #[test]
    fn useful_fraction_matches_bernoulli() {
        let mut rng = rng::stream(99, &[]);
        let question = q(0.0, 1, 0.5);
        let useful = (0..10_000)
            .filter(|_| {
                let (o, _) = env_transition(&question, EnvState::default(), Action::ToolCall, 6, &mut rng).unwrap();
                o == Some(ObservationKind::Useful)
            })
            .count();
        let frac = useful as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn judge_rules() {
        let mut rng = rng::stream(3, &[]);
        let s = |u, m| EnvState {
            useful_hops: u,
            misleading_count: m,
            turn: u + m,
        };
        assert!(judge(&q(1.0, 1, 0.0), &s(0, 0), Action::AnswerMemory, 0.25, &mut rng).unwrap());
        assert!(!judge(&q(0.0, 1, 0.0), &s(0, 0), Action::AnswerMemory, 0.25, &mut rng).unwrap());
        assert!(!judge(&q(0.0, 2, 0.0), &s(1, 0), Action::AnswerEvidence, 0.25, &mut rng).unwrap());
        assert!(judge(&q(0.0, 2, 0.0), &s(2, 0), Action::AnswerEvidence, 0.25, &mut rng).unwrap());
        assert!(!judge(&q(1.0, 2, 0.0), &s(2, 1), Action::AnswerEvidence, 0.0, &mut rng).unwrap());
        assert!(!judge(&q(1.0, 1, 0.0), &s(2, 0), Action::Malformed, 0.25, &mut rng).unwrap());
        assert!(judge(&q(0.0, 1, 0.0), &s(0, 0), Action::ToolCall, 0.25, &mut rng).is_err());
    }

    #[test]
    fn poisoned_evidence_survival_rate() {
        let mut rng = rng::stream(5, &[]);
        let st = EnvState {
            useful_hops: 1,
            misleading_count: 1,
            turn: 2,
        };
        let hits = (0..20_000)
            .filter(|_| judge(&q(0.0, 1, 0.5), &st, Action::AnswerEvidence, 0.25, &mut rng).unwrap())
            .count();
        assert!((hits as f64 / 20_000.0 - 0.25).abs() < 0.015);
    }

    #[test]
    fn jsonl_round_trip() {
        let world = World::generate(
            &WorldConfig {
                n_questions: 20,
                ..Default::default()
            },
            6,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.jsonl");
        world.export_jsonl(&path).unwrap();
        let back = World::import_jsonl(&path, 6, world.eta_poison).unwrap();
        assert_eq!(back.questions, world.questions);
    }
}
