//! Run artifacts, the lambda sweep and multi-seed method comparison.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Method, TrainConfig};
use crate::error::{AkbeError, Result};
use crate::metrics::{self, DegradationReport, MetricsRecord, Phase, Tp};
use crate::train::{self, TrainingRun};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "policy.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const TRACE_FILE: &str = "trajectories.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Size of the early and late training windows used for category shifts.
pub const CATEGORY_WINDOW: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub method: Method,
    pub created: String,
    pub files: Vec<FileHash>,
    pub best_eval_step: Option<usize>,
    pub best_eval_em: Option<f64>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| AkbeError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| AkbeError::Data(format!("{}: {e}", path.display())))
    }

    /// Recomputes every listed hash against the files in `dir`.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            let actual = sha256_file(&dir.join(&f.file))?;
            if actual != f.sha256 {
                return Err(AkbeError::Data(format!("hash mismatch for {}", f.file)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub trajectories: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub config: PathBuf,
    pub manifest: PathBuf,
    pub svg: Vec<PathBuf>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| AkbeError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| AkbeError::io(path, e))
}

fn trace_bytes(run: &TrainingRun) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for group in &run.trace {
        for t in group.with_tool.iter().chain(&group.no_tool) {
            serde_json::to_writer(&mut out, t).map_err(|e| AkbeError::Contract(e.to_string()))?;
            out.write_all(b"\n").expect("writing to a Vec");
        }
    }
    Ok(out)
}

/// Writes the charts for a metrics table: EM and mean TC over steps, one
/// series per phase.
pub fn write_svg_charts(records: &[MetricsRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    let series = |phase: Phase, f: fn(&MetricsRecord) -> f64| -> (String, Vec<(f64, f64)>) {
        let name = match phase {
            Phase::Train => "train",
            Phase::Eval => "eval",
        };
        let pts = records
            .iter()
            .filter(|r| r.phase == phase)
            .map(|r| (r.step as f64, f(r)))
            .collect();
        (name.to_string(), pts)
    };
    let mut paths = Vec::new();
    for (file, title, f) in [
        (
            "em.svg",
            "Exact match",
            (|r: &MetricsRecord| r.em) as fn(&MetricsRecord) -> f64,
        ),
        ("tc.svg", "Mean tool calls", |r: &MetricsRecord| r.mean_tc),
    ] {
        let svg = metrics::svg_line_chart(title, title, &[series(Phase::Train, f), series(Phase::Eval, f)]);
        let path = dir.join(file);
        write_file(&path, svg.as_bytes())?;
        paths.push(path);
    }
    Ok(paths)
}

/// Trains and writes metrics, checkpoint, config snapshot, optional trace
/// and a manifest of content hashes into `out_dir`.
pub fn run_experiment(
    cfg: &TrainConfig,
    out_dir: &Path,
    trace: bool,
    svg: bool,
    threads: usize,
) -> Result<RunArtifacts> {
    let run = train::run_training(cfg, threads, trace)?;
    fs::create_dir_all(out_dir).map_err(|e| AkbeError::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let config_path = out_dir.join(CONFIG_FILE);
    let manifest_path = out_dir.join(MANIFEST_FILE);

    let mut files = Vec::new();
    let mut emit = |path: &Path, bytes: &[u8]| -> Result<()> {
        write_file(path, bytes)?;
        files.push(FileHash {
            file: path.file_name().unwrap().to_string_lossy().into_owned(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    };
    emit(&metrics_path, &metrics::metrics_csv_bytes(&run.records))?;
    emit(&ckpt_path, run.params.to_checkpoint_string().as_bytes())?;
    emit(&config_path, cfg.to_toml_string().as_bytes())?;
    let trajectories = if trace {
        let path = out_dir.join(TRACE_FILE);
        emit(&path, &trace_bytes(&run)?)?;
        Some(path)
    } else {
        None
    };
    let svg_paths = if svg {
        write_svg_charts(&run.records, out_dir)?
    } else {
        Vec::new()
    };

    let manifest = Manifest {
        seed: cfg.seed,
        method: cfg.method,
        created: chrono::Utc::now().to_rfc3339(),
        files,
        best_eval_step: run.best_eval.map(|b| b.0),
        best_eval_em: run.best_eval.map(|b| b.1),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| AkbeError::Contract(e.to_string()))?;
    write_file(&manifest_path, json.as_bytes())?;
    Ok(RunArtifacts {
        dir: out_dir.to_path_buf(),
        metrics: metrics_path,
        trajectories,
        checkpoint: ckpt_path,
        config: config_path,
        manifest: manifest_path,
        svg: svg_paths,
    })
}

/// Final metrics: mean over evaluations in the last tenth of training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub em: f64,
    pub mean_tc: f64,
    pub tp: Tp,
}

impl FinalMetrics {
    fn from_means(em: f64, mean_tc: f64) -> FinalMetrics {
        let tp = if mean_tc > 0.0 {
            Tp::Finite(em / mean_tc)
        } else {
            Tp::Inf
        };
        FinalMetrics { em, mean_tc, tp }
    }
}

/// Mean eval EM and TC over evaluations with `lo < step <= hi`.
pub fn eval_window(records: &[MetricsRecord], lo: usize, hi: usize) -> Option<FinalMetrics> {
    let window: Vec<&MetricsRecord> = records
        .iter()
        .filter(|r| r.phase == Phase::Eval && r.step > lo && r.step <= hi)
        .collect();
    if window.is_empty() {
        return None;
    }
    let n = window.len() as f64;
    Some(FinalMetrics::from_means(
        window.iter().map(|r| r.em).sum::<f64>() / n,
        window.iter().map(|r| r.mean_tc).sum::<f64>() / n,
    ))
}

fn tenth(steps: usize) -> usize {
    steps.div_ceil(10)
}

/// Metrics over the last tenth of steps, falling back to the last
/// evaluation if none landed there.
pub fn final_metrics(records: &[MetricsRecord], steps: usize) -> Result<FinalMetrics> {
    eval_window(records, steps - tenth(steps), steps)
        .or_else(|| {
            let last = records.iter().rev().find(|r| r.phase == Phase::Eval)?;
            Some(FinalMetrics::from_means(last.em, last.mean_tc))
        })
        .ok_or_else(|| AkbeError::Config("run has no evaluation records".into()))
}

/// Mean training category fractions over steps in `lo < step <= hi`.
pub fn category_window(records: &[MetricsRecord], lo: usize, hi: usize) -> [f64; 4] {
    let window: Vec<&MetricsRecord> = records
        .iter()
        .filter(|r| r.phase == Phase::Train && r.step > lo && r.step <= hi)
        .collect();
    let mut out = [0.0; 4];
    for r in &window {
        for (o, f) in out.iter_mut().zip(r.category_fractions) {
            *o += f;
        }
    }
    out.map(|v| v / window.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub em: f64,
    pub mean_tc: f64,
    pub tp: Tp,
}

/// One AKBE run per lambda on a shared world and seed.
pub fn sweep_lambda(base: &TrainConfig, grid: &[f64], threads: usize) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(AkbeError::Config("lambda grid is empty".into()));
    }
    grid.iter()
        .map(|&lambda| {
            let mut cfg = base.clone();
            cfg.method = Method::Akbe;
            cfg.akbe.lambda = lambda;
            let run = train::run_training(&cfg, threads, false)?;
            let f = final_metrics(&run.records, cfg.steps)?;
            Ok(SweepRow {
                lambda,
                em: f.em,
                mean_tc: f.mean_tc,
                tp: f.tp,
            })
        })
        .collect()
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda\tem\tmean_tc\ttp\n");
    for r in rows {
        out += &format!("{}\t{:.4}\t{:.4}\t{}\n", r.lambda, r.em, r.mean_tc, r.tp);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationCounts {
    pub original: usize,
    pub redundant: usize,
    pub hallucinated: usize,
    pub out_of_scope: usize,
}

impl From<&DegradationReport> for DegradationCounts {
    fn from(r: &DegradationReport) -> Self {
        DegradationCounts {
            original: r.original,
            redundant: r.redundant,
            hallucinated: r.hallucinated,
            out_of_scope: r.out_of_scope,
        }
    }
}

/// One (method, seed) row of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub final_metrics: FinalMetrics,
    /// Eval means over the first tenth of steps.
    pub early_metrics: FinalMetrics,
    pub early_categories: [f64; 4],
    pub late_categories: [f64; 4],
    pub degradation: DegradationCounts,
    /// `(step, em, mean_tc)` of every evaluation.
    pub eval_series: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub steps: usize,
    pub runs: Vec<RunSummary>,
}

impl ComparisonReport {
    pub fn runs_for(&self, method: Method) -> impl Iterator<Item = &RunSummary> {
        self.runs.iter().filter(move |r| r.method == method)
    }

    pub fn get(&self, method: Method, seed: u64) -> Option<&RunSummary> {
        self.runs.iter().find(|r| r.method == method && r.seed == seed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(
            "method\tseed\tem\tmean_tc\ttp\tearly[td,eff,hal,bw]\tlate[td,eff,hal,bw]\toriginal\tredundant\thallucinated\n",
        );
        let fmt = |c: &[f64; 4]| format!("{:.3},{:.3},{:.3},{:.3}", c[0], c[1], c[2], c[3]);
        for r in &self.runs {
            out += &format!(
                "{}\t{}\t{:.4}\t{:.4}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.method.name(),
                r.seed,
                r.final_metrics.em,
                r.final_metrics.mean_tc,
                r.final_metrics.tp,
                fmt(&r.early_categories),
                fmt(&r.late_categories),
                r.degradation.original,
                r.degradation.redundant,
                r.degradation.hallucinated,
            );
        }
        for r in self.runs.iter().filter(|r| r.method == Method::AkbeDpo) {
            out += &format!("\nakbe_dpo seed {} eval series (step, em, mean_tc):\n", r.seed);
            for (s, em, tc) in &r.eval_series {
                out += &format!("{s}\t{em:.4}\t{tc:.4}\n");
            }
        }
        out
    }
}

pub fn summarize(run: &TrainingRun) -> Result<RunSummary> {
    let steps = run.config.steps;
    let first = run.first_eval.as_ref();
    let last = run.last_eval.as_ref();
    let (Some(first), Some(last)) = (first, last) else {
        return Err(AkbeError::Config("run has no evaluation records".into()));
    };
    let degradation = metrics::degradation_tracking(&first.per_question, &last.per_question)?;
    let early = eval_window(&run.records, 0, tenth(steps))
        .unwrap_or_else(|| FinalMetrics::from_means(first.record.em, first.record.mean_tc));
    Ok(RunSummary {
        method: run.config.method,
        seed: run.config.seed,
        final_metrics: final_metrics(&run.records, steps)?,
        early_metrics: early,
        early_categories: category_window(&run.records, 0, CATEGORY_WINDOW.min(steps)),
        late_categories: category_window(&run.records, steps.saturating_sub(CATEGORY_WINDOW), steps),
        degradation: DegradationCounts::from(&degradation),
        eval_series: run.eval_records().map(|r| (r.step, r.em, r.mean_tc)).collect(),
    })
}

/// Trains every method on seeds `base.seed .. base.seed + n_seeds` over the
/// same world. Runs execute in parallel; each is internally deterministic.
pub fn compare_methods(
    base: &TrainConfig,
    methods: &[Method],
    n_seeds: usize,
    threads: usize,
) -> Result<ComparisonReport> {
    if methods.is_empty() || n_seeds == 0 {
        return Err(AkbeError::Config(
            "compare needs at least one method and one seed".into(),
        ));
    }
    let jobs: Vec<TrainConfig> = methods
        .iter()
        .flat_map(|&m| {
            (0..n_seeds as u64).map(move |i| {
                let mut cfg = base.clone();
                cfg.method = m;
                cfg.seed = base.seed + i;
                cfg
            })
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| AkbeError::Config(format!("thread pool: {e}")))?;
    let runs = pool.install(|| {
        jobs.par_iter()
            .map(|cfg| summarize(&train::run_training(cfg, 1, false)?))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(ComparisonReport {
        steps: base.steps,
        runs,
    })
}
