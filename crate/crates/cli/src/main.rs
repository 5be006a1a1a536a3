use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use akbe_core::experiments::{self, Manifest};
use akbe_core::metrics;
use akbe_core::{train, AkbeError, Method, PolicyParams, Result, TrainConfig};

#[derive(Parser)]
#[command(name = "akbe", version, about = "Boundary-aware tool-use policy training")]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file mirroring TrainConfig; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
}

impl Common {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write metrics, checkpoint, config and manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<Method>,
        /// Write every rollout to trajectories.jsonl.
        #[arg(long)]
        trace: bool,
        /// Write EM and TC charts.
        #[arg(long)]
        svg: bool,
    },
    /// Evaluate a checkpoint on the held-out questions.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train AKBE once per lambda and tabulate final metrics.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.2,1.0")]
        grid: Vec<f64>,
    },
    /// Train several methods over several seeds and write a comparison report.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "grpo,akbe,otc,akbe_dpo")]
        methods: Vec<Method>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Label held-out questions by how an early checkpoint's correct answers
    /// changed in a late checkpoint.
    TrackDegradation {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        early: PathBuf,
        #[arg(long)]
        late: PathBuf,
    },
    /// Summarize a run directory, verify its manifest and optionally chart it.
    Report {
        /// Directory written by `train`.
        run_dir: PathBuf,
        #[arg(long)]
        svg: bool,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| AkbeError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| AkbeError::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads;
    match cli.command {
        Command::Train {
            common,
            method,
            trace,
            svg,
        } => {
            let mut cfg = common.load()?;
            if let Some(m) = method {
                cfg.method = m;
            }
            let art = experiments::run_experiment(&cfg, &common.out_dir, trace, svg, threads)?;
            println!("wrote {}", art.dir.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let params = PolicyParams::load(&checkpoint)?;
            let (_, eval_world) = train::build_worlds(&cfg)?;
            let ev = train::evaluate(&params, &eval_world, &cfg, 0)?;
            let r = &ev.record;
            println!("em\tmean_tc\ttp\n{:.4}\t{:.4}\t{}", r.em, r.mean_tc, r.tp);
        }
        Command::SweepLambda { common, grid } => {
            let cfg = common.load()?;
            let rows = experiments::sweep_lambda(&cfg, &grid, threads)?;
            let table = experiments::sweep_table(&rows);
            create_dir(&common.out_dir)?;
            write(&common.out_dir.join("sweep.tsv"), &table)?;
            print!("{table}");
        }
        Command::Compare { common, methods, seeds } => {
            let cfg = common.load()?;
            let report = experiments::compare_methods(&cfg, &methods, seeds, threads)?;
            create_dir(&common.out_dir)?;
            write(&common.out_dir.join("comparison.json"), &report.to_json())?;
            let text = report.to_text();
            write(&common.out_dir.join("comparison.tsv"), &text)?;
            print!("{text}");
        }
        Command::TrackDegradation { common, early, late } => {
            let cfg = common.load()?;
            let (_, eval_world) = train::build_worlds(&cfg)?;
            let outcomes = |p: &Path| -> Result<_> {
                let params = PolicyParams::load(p)?;
                Ok(train::evaluate(&params, &eval_world, &cfg, 0)?.per_question)
            };
            let report = metrics::degradation_tracking(&outcomes(&early)?, &outcomes(&late)?)?;
            create_dir(&common.out_dir)?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| AkbeError::Contract(e.to_string()))?;
            write(&common.out_dir.join("degradation.json"), &json)?;
            println!(
                "original\tredundant\thallucinated\tout_of_scope\n{}\t{}\t{}\t{}",
                report.original, report.redundant, report.hallucinated, report.out_of_scope
            );
        }
        Command::Report { run_dir, svg } => {
            let manifest = Manifest::load(&run_dir.join(experiments::MANIFEST_FILE))?;
            manifest.verify(&run_dir)?;
            let cfg = TrainConfig::load(&run_dir.join(experiments::CONFIG_FILE))?;
            let records = metrics::read_metrics_csv(&run_dir.join(experiments::METRICS_FILE))?;
            let f = experiments::final_metrics(&records, cfg.steps)?;
            println!("method\tseed\tem\tmean_tc\ttp");
            println!(
                "{}\t{}\t{:.4}\t{:.4}\t{}",
                cfg.method.name(),
                cfg.seed,
                f.em,
                f.mean_tc,
                f.tp
            );
            if let (Some(step), Some(em)) = (manifest.best_eval_step, manifest.best_eval_em) {
                println!("best eval: step {step}, em {em:.4}");
            }
            if svg {
                for p in experiments::write_svg_charts(&records, &run_dir)? {
                    println!("wrote {}", p.display());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
