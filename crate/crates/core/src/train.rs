//! The per-batch training loop, held-out evaluation and run orchestration.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::akbe::{self, AkbeVariant, PreferencePair, Signal, SignalSet};
use crate::config::{EvalDecoding, Method, TrainConfig};
use crate::env::World;
use crate::error::{AkbeError, Result};
use crate::grpo::{self, group_advantages, LossGrad};
use crate::metrics::{self, EvalOutcome, MetricsRecord, Phase};
use crate::policy::{self, full_feature_dim, PolicyParams};
use crate::rng::{self, tag};
use crate::rollout::{self, Decoding, RolloutKey};
use crate::types::{Category, DualPathOutcome, QuestionId, QuestionSpec, RolloutGroup, RolloutPath};

/// Tolerance of the sampled-vs-replayed log-probability check.
pub const ON_POLICY_TOL: f64 = 1e-10;

/// Everything one training step produced.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub params: PolicyParams,
    pub record: MetricsRecord,
    pub outcomes: Vec<DualPathOutcome>,
    pub groups: Vec<RolloutGroup>,
}

/// Mutable state carried across steps besides the parameters.
#[derive(Debug, Clone, Default)]
pub struct SignalCache {
    targets: HashMap<QuestionId, Signal>,
}

struct QuestionWork {
    group: RolloutGroup,
    outcome: DualPathOutcome,
    advantages: grpo::AdvantageSet,
    signal: Option<Signal>,
    pair: Option<PreferencePair>,
    mean_reward: f64,
}

fn numeric_check(lg: &LossGrad, what: &str, q: QuestionId) -> Result<()> {
    if !lg.loss.is_finite() || !lg.grad.is_finite() {
        return Err(AkbeError::Numeric(format!("non-finite {what} term for question {q}")));
    }
    Ok(())
}

/// Sampled log-probabilities must match a replay under the sampling
/// parameters.
pub fn check_on_policy(params: &PolicyParams, group: &RolloutGroup, world: &World) -> Result<()> {
    for t in group.with_tool.iter().chain(&group.no_tool) {
        let replayed = policy::traj_logprob(params, t, world)?;
        let sampled = t.sampled_log_prob();
        if (replayed - sampled).abs() > ON_POLICY_TOL {
            return Err(AkbeError::Numeric(format!(
                "{}: sampled log-prob {sampled} differs from replay {replayed}",
                t.question_id
            )));
        }
    }
    Ok(())
}

fn question_work(
    params: &PolicyParams,
    world: &World,
    q: &QuestionSpec,
    cfg: &TrainConfig,
    step: usize,
    frozen: Option<&SignalCache>,
) -> Result<QuestionWork> {
    let key = RolloutKey {
        seed: cfg.seed,
        step: step as u64,
    };
    let with_tool = rollout::rollout_with_tool(params, world, q, &cfg.budget, key)?;
    let no_tool = if cfg.runs_no_tool() {
        rollout::rollout_no_tool(params, world, q, &cfg.budget, key)?
    } else {
        Vec::new()
    };
    let group = RolloutGroup {
        question: q.clone(),
        with_tool,
        no_tool,
    };
    check_on_policy(params, &group, world)?;

    let grpo_cfg = cfg.effective_grpo();
    let rewards: Vec<f64> = group.with_tool.iter().map(|t| grpo_cfg.reward_of(t)).collect();
    let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let advantages = group_advantages(&rewards)?;

    let mut select_rng = rng::stream(cfg.seed, &[tag::SELECT, step as u64, q.id.0]);
    let mut outcome = akbe::classify(&group);
    if !cfg.runs_no_tool() {
        // Without a no-tool probe the NT bit is unknown; report it as 0.
        outcome.category = Category::from_outcomes(outcome.wt, false);
    }
    let mut signal = None;
    let mut pair = None;
    if cfg.method.uses_signals() {
        outcome.target = akbe::select_target(&group, &outcome, &mut select_rng);
        signal = match frozen {
            Some(cache) => cache.targets.get(&q.id).cloned(),
            None => match &outcome.target {
                Some(t) => Some(Signal {
                    question_id: q.id,
                    target: akbe::in_tool_context(params, t, world)?,
                    category: outcome.category,
                }),
                None => None,
            },
        };
        if cfg.akbe.variant == AkbeVariant::Dpo || cfg.method == Method::AkbeDpo {
            if let Some(s) = &signal {
                pair = akbe::select_rejected(&group, &s.target, &mut select_rng).map(|rejected| PreferencePair {
                    preferred: s.target.clone(),
                    rejected,
                });
            }
        }
    }
    Ok(QuestionWork {
        group,
        outcome,
        advantages,
        signal,
        pair,
        mean_reward,
    })
}

/// Losses of one batch at `params`, with rollouts and targets held fixed.
struct BatchLoss {
    rl: LossGrad,
    aux: LossGrad,
    total: LossGrad,
}

fn batch_loss(
    params: &PolicyParams,
    old_params: &PolicyParams,
    ref_params: &PolicyParams,
    work: &[QuestionWork],
    cfg: &TrainConfig,
    world: &World,
) -> Result<BatchLoss> {
    let grpo_cfg = cfg.effective_grpo();
    let per_question: Vec<(LossGrad, LossGrad)> = work
        .par_iter()
        .map(|w| {
            let qid = w.group.question.id;
            let rl = grpo::grpo_loss_and_grad(
                params,
                old_params,
                ref_params,
                &w.group.with_tool,
                &w.advantages,
                &grpo_cfg,
                world,
            )?;
            numeric_check(&rl, "RL", qid)?;
            let aux = if !cfg.method.uses_signals() {
                LossGrad::zero(params)
            } else if cfg.method == Method::AkbeDpo || cfg.akbe.variant == AkbeVariant::Dpo {
                let pairs: Vec<PreferencePair> = w.pair.iter().cloned().collect();
                akbe::dpo_loss_and_grad(params, ref_params, &pairs, cfg.akbe.dpo_beta, world)?
            } else {
                let set = SignalSet {
                    signals: w.signal.iter().cloned().collect(),
                };
                let unnormalized = akbe::AkbeConfig {
                    normalize_akbe_by_signals: false,
                    ..cfg.akbe
                };
                akbe::akbe_loss_and_grad(params, &set, &unnormalized, world)?
            };
            numeric_check(&aux, "boundary-guided", qid)?;
            Ok((rl, aux))
        })
        .collect::<Result<_>>()?;

    // Reduce in index order for bit-stable sums.
    let mut rl = LossGrad::zero(params);
    let mut aux = LossGrad::zero(params);
    for (r, a) in &per_question {
        rl.accumulate(r, 1.0);
        aux.accumulate(a, 1.0);
    }
    let signal_count = work.iter().filter(|w| w.signal.is_some()).count();
    if cfg.akbe.normalize_akbe_by_signals && signal_count > 0 {
        let k = 1.0 / signal_count as f64;
        aux.loss *= k;
        aux.grad.scale(k);
    }
    let lambda = if cfg.method.uses_signals() {
        cfg.akbe.lambda
    } else {
        0.0
    };
    let total = akbe::total_loss(&rl, &aux, lambda);
    if !total.loss.is_finite() || !total.grad.is_finite() {
        return Err(AkbeError::Numeric("non-finite total loss".into()));
    }
    Ok(BatchLoss { rl, aux, total })
}

/// One iteration of the per-batch algorithm: dual-path rollouts,
/// classification and target selection, the joint loss and a gradient step.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    world: &World,
    batch: &[QuestionSpec],
    cfg: &TrainConfig,
    step: usize,
    cache: &mut SignalCache,
) -> Result<StepOutput> {
    let frozen = cfg.freeze_signals_after.is_some_and(|k| step > k);
    let work: Vec<QuestionWork> = batch
        .par_iter()
        .map(|q| question_work(params, world, q, cfg, step, frozen.then_some(&*cache)))
        .collect::<Result<_>>()?;
    if !frozen && cfg.method.uses_signals() {
        for w in &work {
            if let Some(s) = &w.signal {
                cache.targets.insert(s.question_id, s.clone());
            }
        }
    }

    let old_params = params.clone();
    let mut current = params.clone();
    let mut first = None;
    for _ in 0..cfg.updates_per_batch {
        let loss = batch_loss(&current, &old_params, ref_params, &work, cfg, world)?;
        current.descend(&loss.total.grad, cfg.learning_rate);
        first.get_or_insert(loss);
    }
    let first = first.expect("at least one update");
    if !current.weights.is_finite() {
        return Err(AkbeError::Numeric(format!(
            "parameters became non-finite at step {step}"
        )));
    }

    let evals: Vec<(bool, usize)> = work
        .iter()
        .flat_map(|w| w.group.with_tool.iter().map(|t| (t.is_success(), t.tc)))
        .collect();
    let (em, mean_tc, tp) = metrics::aggregate_metrics(&evals)?;
    let outcomes: Vec<DualPathOutcome> = work.iter().map(|w| w.outcome.clone()).collect();
    let mut cost = metrics::cost_accounting(
        work.iter().flat_map(|w| &w.group.with_tool),
        cfg.cost_per_tool,
        cfg.cost_per_step,
    );
    if cfg.method.uses_signals() {
        cost += metrics::cost_accounting(
            work.iter().flat_map(|w| &w.group.no_tool),
            cfg.cost_per_tool,
            cfg.cost_per_step,
        );
    }
    let record = MetricsRecord {
        step,
        phase: Phase::Train,
        em,
        mean_tc,
        tp,
        category_fractions: metrics::category_distribution(&outcomes)?,
        mean_reward: work.iter().map(|w| w.mean_reward).sum::<f64>() / work.len() as f64,
        signal_count: work.iter().filter(|w| w.signal.is_some()).count(),
        cost_units: cost,
        loss_grpo: first.rl.loss,
        loss_akbe: first.aux.loss,
        loss_total: first.total.loss,
    };
    Ok(StepOutput {
        params: current,
        record,
        outcomes,
        groups: work.into_iter().map(|w| w.group).collect(),
    })
}

/// Held-out evaluation result.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub record: MetricsRecord,
    pub per_question: BTreeMap<QuestionId, EvalOutcome>,
}

/// Evaluates one with-tool and one no-tool episode per held-out question.
/// Judge and environment randomness depends only on the question, so
/// checkpoints are compared under common random numbers.
pub fn evaluate(params: &PolicyParams, eval_world: &World, cfg: &TrainConfig, step: usize) -> Result<Evaluation> {
    let decoding = match cfg.eval_decoding {
        EvalDecoding::Greedy => Decoding::Greedy,
        EvalDecoding::Sample => Decoding::Sample,
    };
    let results: Vec<_> = eval_world
        .questions
        .par_iter()
        .map(|q| {
            let episode = |path: RolloutPath| {
                let mut rng = rng::stream(cfg.seed, &[tag::EVAL, q.id.0, path.stream_tag()]);
                rollout::rollout_one(params, eval_world, q, path, decoding, &mut rng)
            };
            Ok((episode(RolloutPath::WithTool)?, episode(RolloutPath::NoTool)?))
        })
        .collect::<Result<_>>()?;
    let evals: Vec<(bool, usize)> = results.iter().map(|(w, _)| (w.is_success(), w.tc)).collect();
    let (em, mean_tc, tp) = metrics::aggregate_metrics(&evals)?;
    let categories = results
        .iter()
        .map(|(w, n)| Category::from_outcomes(w.is_success(), n.is_success()));
    let per_question = results
        .iter()
        .map(|(w, _)| {
            (
                w.question_id,
                EvalOutcome {
                    correct: w.is_success(),
                    tc: w.tc,
                },
            )
        })
        .collect();
    let record = MetricsRecord {
        step,
        phase: Phase::Eval,
        em,
        mean_tc,
        tp,
        category_fractions: metrics::category_fractions(categories)?,
        mean_reward: results.iter().map(|(w, _)| f64::from(w.reward)).sum::<f64>() / results.len() as f64,
        signal_count: 0,
        cost_units: metrics::cost_accounting(results.iter().map(|(w, _)| w), cfg.cost_per_tool, cfg.cost_per_step),
        loss_grpo: 0.0,
        loss_akbe: 0.0,
        loss_total: 0.0,
    };
    Ok(Evaluation { record, per_question })
}

/// Training and held-out worlds for a config.
pub fn build_worlds(cfg: &TrainConfig) -> Result<(World, World)> {
    let train = World::generate(&cfg.world, cfg.budget.max_turns)?;
    let held_out_cfg = crate::env::WorldConfig {
        n_questions: cfg.eval_questions,
        seed: rng::derive_seed(cfg.world.seed, &[tag::HELD_OUT]),
        ..cfg.world.clone()
    };
    let eval = World::generate(&held_out_cfg, cfg.budget.max_turns)?;
    Ok((train, eval))
}

pub fn initial_params(cfg: &TrainConfig, world: &World) -> PolicyParams {
    let mut rng = rng::stream(cfg.seed, &[tag::INIT]);
    PolicyParams::random(full_feature_dim(world.feature_dim()), cfg.init_scale, &mut rng)
}

/// In-memory result of a training run.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub config: TrainConfig,
    pub records: Vec<MetricsRecord>,
    pub params: PolicyParams,
    pub first_eval: Option<Evaluation>,
    pub last_eval: Option<Evaluation>,
    /// Step and EM of the best evaluation.
    pub best_eval: Option<(usize, f64)>,
    /// Per-step trajectories, kept only when tracing.
    pub trace: Vec<RolloutGroup>,
}

impl TrainingRun {
    pub fn train_records(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.records.iter().filter(|r| r.phase == Phase::Train)
    }

    pub fn eval_records(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.records.iter().filter(|r| r.phase == Phase::Eval)
    }
}

/// Runs `cfg.steps` training steps on seeded shuffled batches with periodic
/// held-out evaluation. `threads` only affects speed, never results.
pub fn run_training(cfg: &TrainConfig, threads: usize, trace: bool) -> Result<TrainingRun> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| AkbeError::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_training_inner(cfg, trace))
}

fn run_training_inner(cfg: &TrainConfig, trace: bool) -> Result<TrainingRun> {
    let (world, eval_world) = build_worlds(cfg)?;
    let mut params = initial_params(cfg, &world);
    let ref_params = params.clone();
    let mut cache = SignalCache::default();
    let mut records = Vec::new();
    let mut trace_groups = Vec::new();
    let (mut first_eval, mut last_eval, mut best_eval) = (None, None, None::<(usize, f64)>);

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..world.len()).collect();
                order.shuffle(&mut rng::stream(cfg.seed, &[tag::SHUFFLE, epoch]));
                epoch += 1;
                cursor = 0;
            }
            batch.push(world.questions[order[cursor]].clone());
            cursor += 1;
        }
        let out = train_step(&params, &ref_params, &world, &batch, cfg, step, &mut cache)?;
        params = out.params;
        records.push(out.record);
        if trace {
            trace_groups.extend(out.groups);
        }
        if step % cfg.eval_every == 0 {
            let ev = evaluate(&params, &eval_world, cfg, step)?;
            records.push(ev.record.clone());
            if best_eval.is_none_or(|(_, em)| ev.record.em > em) {
                best_eval = Some((step, ev.record.em));
            }
            if first_eval.is_none() {
                first_eval = Some(ev.clone());
            }
            last_eval = Some(ev);
        }
    }
    Ok(TrainingRun {
        config: cfg.clone(),
        records,
        params,
        first_eval,
        last_eval,
        best_eval,
        trace: trace_groups,
    })
}
