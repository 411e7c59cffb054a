use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kon_core::harness::{
    self, evaluate, format_table, gradcheck_suite, train, Checkpoint, RankingReport, RunConfig,
    StudyRow, Variant,
};
use kon_core::kgdata::Split;
use kon_core::{KonError, Result};
use serde::Serialize;

/// Largest relative gradient error the `gradcheck` command accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "kon", version, about = "K-step entity scoring for knowledge-graph completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; the built-in small synthetic setup when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for run artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and report valid/test ranking metrics.
    Train(Common),
    /// Evaluate a saved checkpoint.
    Eval {
        #[arg(long, required = true)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate ablation variants under one seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
    },
    /// Sweep the number of head steps K.
    SweepK {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [2, 4, 8, 16])]
        values: Vec<usize>,
    },
    /// Sweep the number of negative entities.
    SweepNeg {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [16, 128, 1024])]
        values: Vec<usize>,
    },
    /// Compare sum/product aggregation with learnable/constant weights.
    JointOp(Common),
    /// Central-difference check of every loss on a randomized toy model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Elements checked per tensor; all elements when absent.
        #[arg(long)]
        per_tensor: Option<usize>,
    },
}

fn load_config(common: &Common, fallback: fn() -> RunConfig) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => fallback(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| KonError::io(dir, e))?;
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value).map_err(|e| KonError::Config(e.to_string()))?;
    fs::write(&path, text).map_err(|e| KonError::io(&path, e))
}

fn print_report(split: Split, r: &RankingReport) {
    println!(
        "{split:<6} MRR {:.4}  Hits@1 {:.4}  Hits@3 {:.4}  Hits@10 {:.4}  ({} queries)",
        r.mrr, r.hits1, r.hits3, r.hits10, r.queries
    );
}

fn study(common: &Common, fallback: fn() -> RunConfig, run: impl FnOnce(&RunConfig) -> Result<Vec<StudyRow>>) -> Result<()> {
    let cfg = load_config(common, fallback)?;
    let rows = run(&cfg)?;
    print!("{}", format_table(&rows));
    if let Some(dir) = &common.out {
        write_json(dir, "study.json", &rows)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load_config(&common, RunConfig::synthetic_small)?;
            let out = train(&cfg, common.out.as_deref())?;
            println!(
                "trained {} steps in {:.1}s ({} trainable parameters)",
                out.steps,
                out.train_secs,
                out.model.trainable_params()
            );
            let mut reports = Vec::new();
            for split in [Split::Valid, Split::Test] {
                let r = evaluate(&out.model, split)?;
                print_report(split, &r);
                reports.push((split, r));
            }
            if let Some(dir) = &common.out {
                write_json(dir, "report.json", &reports)?;
            }
        }
        Command::Eval {
            checkpoint,
            split,
            out,
        } => {
            let model = Checkpoint::load(&checkpoint)?.restore()?;
            let r = evaluate(&model, split)?;
            print_report(split, &r);
            if let Some(dir) = out {
                write_json(&dir, "report.json", &r)?;
            }
        }
        Command::Ablate { common, variants } => {
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants
            };
            study(&common, RunConfig::synthetic_small, |c| {
                harness::run_ablation(c, &variants)
            })?;
        }
        Command::SweepK { common, values } => {
            study(&common, RunConfig::synthetic_small, |c| harness::sweep_k(c, &values))?;
        }
        Command::SweepNeg { common, values } => {
            study(&common, RunConfig::synthetic_large, |c| {
                harness::sweep_negatives(c, &values)
            })?;
        }
        Command::JointOp(common) => {
            study(&common, RunConfig::synthetic_small, harness::run_joint_op_study)?;
        }
        Command::Gradcheck { seed, per_tensor } => {
            let entries = gradcheck_suite(seed, per_tensor)?;
            let mut ok = true;
            for e in &entries {
                let pass = e.max_rel_err < GRADCHECK_TOLERANCE;
                ok &= pass;
                let worst = e
                    .worst
                    .as_ref()
                    .map_or(String::new(), |(n, i)| format!(" at {n}[{i}]"));
                println!(
                    "{:<9} max rel err {:.3e} over {} elements{worst}  {}",
                    e.loss,
                    e.max_rel_err,
                    e.checked,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
