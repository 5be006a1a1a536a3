//! Linear-softmax policy over the four-action set, with exact
//! log-probabilities and analytic gradients.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{EnvState, World};
use crate::error::{AkbeError, Result};
use crate::types::{Action, QuestionSpec, RolloutPath, Trajectory};

/// Number of state features appended after the question features:
/// normalized turn, has-evidence, sufficient-evidence, misleading, bias.
pub const STATE_FEATURES: usize = 5;

/// Dense row-major `rows x cols` matrix; used for both parameters and
/// gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(AkbeError::Config(format!(
                "matrix data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// `self[r, :] += alpha * v`.
    pub fn add_row_scaled(&mut self, r: usize, alpha: f64, v: &[f64]) {
        let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
        for (a, b) in row.iter_mut().zip(v) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub type Gradient = Matrix;

/// Parameters θ: one weight row per action over the full feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub weights: Matrix,
}

impl PolicyParams {
    pub fn zeros(feature_dim: usize) -> PolicyParams {
        PolicyParams {
            weights: Matrix::zeros(Action::COUNT, feature_dim),
        }
    }

    /// Small Gaussian initialization.
    pub fn random(feature_dim: usize, scale: f64, rng: &mut impl Rng) -> PolicyParams {
        let mut p = PolicyParams::zeros(feature_dim);
        if scale > 0.0 {
            let normal = Normal::new(0.0, scale).expect("positive scale");
            p.weights
                .as_mut_slice()
                .iter_mut()
                .for_each(|w| *w = normal.sample(rng));
        }
        p
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn zero_grad(&self) -> Gradient {
        Matrix::zeros(self.weights.rows(), self.weights.cols())
    }

    /// Gradient-descent step `θ ← θ − lr · g`.
    pub fn descend(&mut self, grad: &Gradient, lr: f64) {
        self.weights.add_scaled(-lr, grad);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| AkbeError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<PolicyParams> {
        let text = std::fs::read_to_string(path).map_err(|e| AkbeError::io(path, e))?;
        PolicyParams::from_checkpoint_str(&text).map_err(|e| AkbeError::Data(format!("{}: {e}", path.display())))
    }

    /// Text checkpoint: a magic line, `version`, `actions` and `dim` header
    /// lines, then one whitespace-separated row per action.
    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::new();
        writeln!(s, "akbe-policy").unwrap();
        writeln!(s, "version {CHECKPOINT_VERSION}").unwrap();
        writeln!(s, "actions {}", self.weights.rows()).unwrap();
        writeln!(s, "dim {}", self.weights.cols()).unwrap();
        for r in 0..self.weights.rows() {
            let row: Vec<String> = self.weights.row(r).iter().map(|v| format!("{v:?}")).collect();
            writeln!(s, "{}", row.join(" ")).unwrap();
        }
        s
    }

    pub fn from_checkpoint_str(text: &str) -> std::result::Result<PolicyParams, String> {
        let mut lines = text.lines();
        if lines.next() != Some("akbe-policy") {
            return Err("missing checkpoint magic".into());
        }
        let mut header = |key: &str| -> std::result::Result<usize, String> {
            let line = lines.next().ok_or_else(|| format!("missing `{key}` header"))?;
            let value = line
                .strip_prefix(key)
                .and_then(|rest| rest.trim().parse().ok())
                .ok_or_else(|| format!("malformed `{key}` header: {line:?}"))?;
            Ok(value)
        };
        let version = header("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let actions = header("actions")?;
        let dim = header("dim")?;
        if actions != Action::COUNT {
            return Err(format!("checkpoint has {actions} actions, expected {}", Action::COUNT));
        }
        let mut data = Vec::with_capacity(actions * dim);
        for r in 0..actions {
            let line = lines.next().ok_or_else(|| format!("missing weight row {r}"))?;
            let row: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
            let row = row.map_err(|e| format!("row {r}: {e}"))?;
            if row.len() != dim {
                return Err(format!("row {r} has {} values, expected {dim}", row.len()));
            }
            data.extend(row);
        }
        let weights = Matrix::from_vec(actions, dim, data).map_err(|e| e.to_string())?;
        if !weights.is_finite() {
            return Err("non-finite weight".into());
        }
        Ok(PolicyParams { weights })
    }
}

pub const CHECKPOINT_VERSION: usize = 1;

/// Policy input: question features followed by the state features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn full_feature_dim(question_dim: usize) -> usize {
    question_dim + STATE_FEATURES
}

pub fn featurize(q: &QuestionSpec, s: &EnvState, max_turns: usize) -> FeatureVector {
    let mut v = Vec::with_capacity(full_feature_dim(q.features.len()));
    v.extend_from_slice(&q.features);
    v.push(s.turn as f64 / max_turns.max(1) as f64);
    v.push(indicator(s.useful_hops >= 1));
    v.push(indicator(s.has_sufficient_evidence(q)));
    v.push(indicator(s.misleading_count >= 1));
    v.push(1.0);
    FeatureVector(v)
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// π(·|c) over the four actions; disallowed actions have probability 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionDistribution {
    pub probs: [f64; Action::COUNT],
    pub allowed: [bool; Action::COUNT],
}

impl ActionDistribution {
    pub fn prob(&self, a: Action) -> f64 {
        self.probs[a.index()]
    }

    pub fn log_prob(&self, a: Action) -> f64 {
        self.prob(a).ln()
    }

    /// Highest-probability allowed action; ties go to the lower index.
    pub fn argmax(&self) -> Action {
        let mut best = None::<usize>;
        for i in 0..Action::COUNT {
            if self.allowed[i] && best.is_none_or(|b| self.probs[i] > self.probs[b]) {
                best = Some(i);
            }
        }
        Action::from_index(best.expect("nonempty support")).unwrap()
    }
}

pub fn support(tool_allowed: bool) -> [bool; Action::COUNT] {
    [tool_allowed, true, true, true]
}

pub fn logits(params: &PolicyParams, phi: &FeatureVector) -> [f64; Action::COUNT] {
    let mut z = [0.0; Action::COUNT];
    for (a, zi) in z.iter_mut().enumerate() {
        *zi = params
            .weights
            .row(a)
            .iter()
            .zip(phi.as_slice())
            .map(|(w, x)| w * x)
            .sum();
    }
    z
}

/// Masked softmax of `W φ`.
pub fn action_distribution(
    params: &PolicyParams,
    phi: &FeatureVector,
    tool_allowed: bool,
) -> Result<ActionDistribution> {
    if params.feature_dim() != phi.len() {
        return Err(AkbeError::Config(format!(
            "policy expects {} features, got {}",
            params.feature_dim(),
            phi.len()
        )));
    }
    Ok(masked_softmax(logits(params, phi), support(tool_allowed)))
}

pub fn masked_softmax(z: [f64; Action::COUNT], allowed: [bool; Action::COUNT]) -> ActionDistribution {
    let max = (0..Action::COUNT)
        .filter(|&i| allowed[i])
        .map(|i| z[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs = [0.0; Action::COUNT];
    let mut total = 0.0;
    for i in 0..Action::COUNT {
        if allowed[i] {
            probs[i] = (z[i] - max).exp();
            total += probs[i];
        }
    }
    probs.iter_mut().for_each(|p| *p /= total);
    ActionDistribution { probs, allowed }
}

/// Samples an action and returns its log-probability.
pub fn sample_action(dist: &ActionDistribution, rng: &mut impl Rng) -> Result<(Action, f64)> {
    let mut last = None;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for i in 0..Action::COUNT {
        if !dist.allowed[i] || dist.probs[i] <= 0.0 {
            continue;
        }
        acc += dist.probs[i];
        last = Some(i);
        if u < acc {
            let a = Action::from_index(i).unwrap();
            return Ok((a, dist.probs[i].ln()));
        }
    }
    // Rounding can leave `acc` a hair below 1.
    match last {
        Some(i) => Ok((Action::from_index(i).unwrap(), dist.probs[i].ln())),
        None => Err(AkbeError::Contract("action distribution has empty support".into())),
    }
}

/// One decision point reconstructed from a recorded trajectory.
#[derive(Debug, Clone)]
pub struct ReplayStep {
    pub features: FeatureVector,
    pub tool_allowed: bool,
    pub action: Action,
}

/// Rebuilds each decision context from the recorded observations. The
/// observations are treated as fixed environment output.
pub fn replay_contexts(traj: &Trajectory, q: &QuestionSpec, max_turns: usize) -> Result<Vec<ReplayStep>> {
    if traj.question_id != q.id {
        return Err(AkbeError::Data(format!(
            "trajectory for {} replayed against {}",
            traj.question_id, q.id
        )));
    }
    let mut state = EnvState::default();
    let mut out = Vec::with_capacity(traj.steps.len());
    for (i, step) in traj.steps.iter().enumerate() {
        let tool_allowed = traj.path == RolloutPath::WithTool && state.turn < max_turns;
        if step.action == Action::ToolCall && !tool_allowed {
            return Err(AkbeError::Data(format!(
                "{}: step {i} calls a tool where tools are disallowed",
                traj.question_id
            )));
        }
        out.push(ReplayStep {
            features: featurize(q, &state, max_turns),
            tool_allowed,
            action: step.action,
        });
        if step.action.is_terminal() {
            if i + 1 != traj.steps.len() {
                return Err(AkbeError::Data(format!(
                    "{}: terminal action at step {i} is not last",
                    traj.question_id
                )));
            }
        } else {
            state.turn += 1;
            match step.observation {
                Some(crate::types::ObservationKind::Useful) => state.useful_hops += 1,
                Some(crate::types::ObservationKind::Misleading) => state.misleading_count += 1,
                None => {
                    return Err(AkbeError::Data(format!(
                        "{}: tool call at step {i} has no observation",
                        traj.question_id
                    )))
                }
            }
        }
    }
    if !traj.steps.last().is_some_and(|s| s.action.is_terminal()) {
        return Err(AkbeError::Data(format!(
            "{}: trajectory does not terminate",
            traj.question_id
        )));
    }
    Ok(out)
}

fn contexts_for(traj: &Trajectory, world: &World) -> Result<Vec<ReplayStep>> {
    replay_contexts(traj, world.get(traj.question_id)?, world.max_turns)
}

/// `Σ_t ln π(a_t | c_t)` over action steps only.
pub fn traj_logprob(params: &PolicyParams, traj: &Trajectory, world: &World) -> Result<f64> {
    let ctx = contexts_for(traj, world)?;
    logprob_over(params, &ctx)
}

pub fn logprob_over(params: &PolicyParams, ctx: &[ReplayStep]) -> Result<f64> {
    let mut total = 0.0;
    for step in ctx {
        let dist = action_distribution(params, &step.features, step.tool_allowed)?;
        total += dist.log_prob(step.action);
    }
    Ok(total)
}

/// `Σ_t (onehot(a_t) − π(·|c_t)) ⊗ φ_t`.
pub fn traj_logprob_grad(params: &PolicyParams, traj: &Trajectory, world: &World) -> Result<Gradient> {
    let ctx = contexts_for(traj, world)?;
    Ok(logprob_and_grad_over(params, &ctx)?.1)
}

pub fn traj_logprob_and_grad(params: &PolicyParams, traj: &Trajectory, world: &World) -> Result<(f64, Gradient)> {
    let ctx = contexts_for(traj, world)?;
    logprob_and_grad_over(params, &ctx)
}

pub fn logprob_and_grad_over(params: &PolicyParams, ctx: &[ReplayStep]) -> Result<(f64, Gradient)> {
    let mut grad = params.zero_grad();
    let mut total = 0.0;
    for step in ctx {
        let dist = action_distribution(params, &step.features, step.tool_allowed)?;
        total += dist.log_prob(step.action);
        let taken = step.action.index();
        for a in 0..Action::COUNT {
            if !dist.allowed[a] {
                continue;
            }
            let coeff = if a == taken { 1.0 } else { 0.0 } - dist.probs[a];
            grad.add_row_scaled(a, coeff, step.features.as_slice());
        }
    }
    Ok((total, grad))
}

pub(crate) fn contexts(traj: &Trajectory, world: &World) -> Result<Vec<ReplayStep>> {
    contexts_for(traj, world)
}
