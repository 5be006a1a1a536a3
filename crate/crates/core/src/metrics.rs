//! Evaluation metrics (EM, TC, TP), category distributions, no-tool
//! confidence histograms, degradation tracking and cost accounting, plus the
//! metrics CSV and static SVG charts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AkbeError, Result};
use crate::types::{Category, DualPathOutcome, QuestionId, RolloutGroup, Trajectory};

/// Tool productivity: correct answers per tool call. `Inf` when no tool was
/// called at all; such values are excluded from comparisons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tp {
    Finite(f64),
    Inf,
}

impl Tp {
    pub fn finite(self) -> Option<f64> {
        match self {
            Tp::Finite(v) => Some(v),
            Tp::Inf => None,
        }
    }

    /// `Some(a > b)` when both are finite.
    pub fn gt(self, other: Tp) -> Option<bool> {
        Some(self.finite()? > other.finite()?)
    }
}

impl fmt::Display for Tp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tp::Finite(v) => write!(f, "{v}"),
            Tp::Inf => f.write_str("inf"),
        }
    }
}

impl std::str::FromStr for Tp {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Tp, String> {
        if s == "inf" {
            Ok(Tp::Inf)
        } else {
            s.parse().map(Tp::Finite).map_err(|e| format!("tp {s:?}: {e}"))
        }
    }
}

/// Serialized as a number, or the string `"inf"`.
impl Serialize for Tp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Tp::Finite(v) => s.serialize_f64(*v),
            Tp::Inf => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Tp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Tp, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Tp::Finite(v)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub phase: Phase,
    pub em: f64,
    pub mean_tc: f64,
    pub tp: Tp,
    /// Fractions in `Category::ALL` order.
    pub category_fractions: [f64; 4],
    pub mean_reward: f64,
    pub signal_count: usize,
    pub cost_units: f64,
    pub loss_grpo: f64,
    pub loss_akbe: f64,
    pub loss_total: f64,
}

/// `(em, mean_tc, tp)` over `(correct, tc)` evaluations.
pub fn aggregate_metrics(evals: &[(bool, usize)]) -> Result<(f64, f64, Tp)> {
    if evals.is_empty() {
        return Err(AkbeError::Config(
            "aggregate_metrics needs at least one evaluation".into(),
        ));
    }
    let n = evals.len() as f64;
    let correct = evals.iter().filter(|(c, _)| *c).count() as f64;
    let total_tc: usize = evals.iter().map(|(_, tc)| tc).sum();
    let tp = if total_tc == 0 {
        Tp::Inf
    } else {
        Tp::Finite(correct / total_tc as f64)
    };
    Ok((correct / n, total_tc as f64 / n, tp))
}

pub fn category_distribution(outcomes: &[DualPathOutcome]) -> Result<[f64; 4]> {
    category_fractions(outcomes.iter().map(|o| o.category))
}

pub fn category_fractions(categories: impl IntoIterator<Item = Category>) -> Result<[f64; 4]> {
    let mut counts = [0usize; 4];
    for c in categories {
        counts[c.index()] += 1;
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(AkbeError::Config("category distribution of an empty set".into()));
    }
    Ok(counts.map(|c| c as f64 / n as f64))
}

/// For questions with at least one correct no-tool rollout, how many of the
/// `g_nt` rollouts were correct. `bins[k - 1]` counts questions with `k`
/// correct.
pub fn nt_confidence_histogram(groups: &[RolloutGroup], g_nt: usize) -> Vec<usize> {
    let mut bins = vec![0usize; g_nt];
    for g in groups {
        let k = g.no_tool.iter().filter(|t| t.is_success()).count();
        if (1..=g_nt).contains(&k) {
            bins[k - 1] += 1;
        }
    }
    bins
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationLabel {
    /// Still correct, no extra tool calls.
    Original,
    /// Still correct but with more tool calls.
    Redundant,
    /// Degraded to incorrect.
    Hallucinated,
    /// Not correct at the early checkpoint.
    OutOfScope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub correct: bool,
    pub tc: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationReport {
    pub labels: BTreeMap<QuestionId, DegradationLabel>,
    pub original: usize,
    pub redundant: usize,
    pub hallucinated: usize,
    pub out_of_scope: usize,
}

pub fn degradation_label(early: EvalOutcome, late: EvalOutcome) -> DegradationLabel {
    match (early.correct, late.correct) {
        (false, _) => DegradationLabel::OutOfScope,
        (true, false) => DegradationLabel::Hallucinated,
        (true, true) if late.tc > early.tc => DegradationLabel::Redundant,
        (true, true) => DegradationLabel::Original,
    }
}

/// Labels each question by how its early-correct answer changed by the late
/// checkpoint. Both maps must cover the same questions.
pub fn degradation_tracking(
    early: &BTreeMap<QuestionId, EvalOutcome>,
    late: &BTreeMap<QuestionId, EvalOutcome>,
) -> Result<DegradationReport> {
    if let Some(id) = late.keys().find(|k| !early.contains_key(k)) {
        return Err(AkbeError::Data(format!("question {id} missing from early evaluation")));
    }
    let mut labels = BTreeMap::new();
    for (id, e) in early {
        let l = late
            .get(id)
            .ok_or_else(|| AkbeError::Data(format!("question {id} missing from late evaluation")))?;
        labels.insert(*id, degradation_label(*e, *l));
    }
    let count = |want| labels.values().filter(|l| **l == want).count();
    Ok(DegradationReport {
        original: count(DegradationLabel::Original),
        redundant: count(DegradationLabel::Redundant),
        hallucinated: count(DegradationLabel::Hallucinated),
        out_of_scope: count(DegradationLabel::OutOfScope),
        labels,
    })
}

/// Abstract rollout cost: `Σ steps·cost_per_step + tc·cost_per_tool`.
pub fn cost_accounting<'a>(
    trajs: impl IntoIterator<Item = &'a Trajectory>,
    cost_per_tool: f64,
    cost_per_step: f64,
) -> f64 {
    trajs
        .into_iter()
        .map(|t| t.steps.len() as f64 * cost_per_step + t.tc as f64 * cost_per_tool)
        .sum()
}

pub const CSV_COLUMNS: [&str; 15] = [
    "step",
    "em",
    "mean_tc",
    "tp",
    "frac_tool_dependent",
    "frac_efficiency",
    "frac_hallucination",
    "frac_both_wrong",
    "mean_reward",
    "signal_count",
    "cost_units",
    "loss_grpo",
    "loss_akbe",
    "loss_total",
    "phase",
];

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    step: usize,
    em: f64,
    mean_tc: f64,
    tp: String,
    frac_tool_dependent: f64,
    frac_efficiency: f64,
    frac_hallucination: f64,
    frac_both_wrong: f64,
    mean_reward: f64,
    signal_count: usize,
    cost_units: f64,
    loss_grpo: f64,
    loss_akbe: f64,
    loss_total: f64,
    phase: Phase,
}

impl From<&MetricsRecord> for CsvRow {
    fn from(r: &MetricsRecord) -> CsvRow {
        let [td, ef, ha, bw] = r.category_fractions;
        CsvRow {
            step: r.step,
            em: r.em,
            mean_tc: r.mean_tc,
            tp: r.tp.to_string(),
            frac_tool_dependent: td,
            frac_efficiency: ef,
            frac_hallucination: ha,
            frac_both_wrong: bw,
            mean_reward: r.mean_reward,
            signal_count: r.signal_count,
            cost_units: r.cost_units,
            loss_grpo: r.loss_grpo,
            loss_akbe: r.loss_akbe,
            loss_total: r.loss_total,
            phase: r.phase,
        }
    }
}

impl TryFrom<CsvRow> for MetricsRecord {
    type Error = String;

    fn try_from(r: CsvRow) -> std::result::Result<MetricsRecord, String> {
        Ok(MetricsRecord {
            step: r.step,
            phase: r.phase,
            em: r.em,
            mean_tc: r.mean_tc,
            tp: r.tp.parse()?,
            category_fractions: [
                r.frac_tool_dependent,
                r.frac_efficiency,
                r.frac_hallucination,
                r.frac_both_wrong,
            ],
            mean_reward: r.mean_reward,
            signal_count: r.signal_count,
            cost_units: r.cost_units,
            loss_grpo: r.loss_grpo,
            loss_akbe: r.loss_akbe,
            loss_total: r.loss_total,
        })
    }
}

/// Serializes records to CSV bytes with the normative column order.
pub fn metrics_csv_bytes(records: &[MetricsRecord]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(CsvRow::from(r)).expect("in-memory csv write");
    }
    if records.is_empty() {
        w.write_record(CSV_COLUMNS).expect("in-memory csv write");
    }
    w.into_inner().expect("in-memory csv flush")
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => AkbeError::io(path, io),
        other => AkbeError::Data(format!("{}: {other:?}", path.display())),
    })?;
    let headers = r
        .headers()
        .map_err(|e| AkbeError::Data(format!("{}: {e}", path.display())))?;
    if headers.iter().collect::<Vec<_>>() != CSV_COLUMNS {
        return Err(AkbeError::Data(format!(
            "{}: unexpected metrics header",
            path.display()
        )));
    }
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row.map_err(|e| AkbeError::Data(format!("{}: {e}", path.display())))?;
            MetricsRecord::try_from(row).map_err(|e| AkbeError::Data(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Minimal static SVG line chart.
pub fn svg_line_chart(title: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let points = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"12\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" transform=\"rotate(-90 12 {})\">{}</text>\n\
         <text x=\"{PAD}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{x0}</text>\n\
         <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{x1}</text>\n\
         <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{y0:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{y1:.3}</text>\n",
        W / 2.0,
        xml_escape(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
        H / 2.0,
        H / 2.0,
        xml_escape(y_label),
        H - PAD + 14.0,
        W - PAD,
        H - PAD + 14.0,
        PAD - 4.0,
        H - PAD,
        PAD - 4.0,
        PAD + 4.0,
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            path.join(" "),
            W - PAD - 120.0,
            PAD + 14.0 * i as f64,
            xml_escape(name),
        ));
    }
    out.push_str("</svg>\n");
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
