//! Command-line entry point.
//!
//! `mopelab <gen-data|train|eval|sweep|routing-report|theorem-demo|grad-check>
//!     --config <path> [--seed N] [--out DIR]`
//!
//! Exit codes: 0 success, 2 config error, 3 numeric failure, 4
//! acceptance-assertion failure (demo commands).

use clap::{Args, Parser, Subcommand};
use mopelab::commands::{
    cmd_eval, cmd_gen_data, cmd_grad_check, cmd_routing_report, cmd_sweep, cmd_theorem_demo,
    cmd_train, DemoSpec,
};
use mopelab::config::{RunConfig, SweepSpec};
use mopelab::gradcheck::GradCheckConfig;
use mopelab::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mopelab", version, about = "mixture-of-prompt-experts fusion lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// override the seed from the config
    #[arg(long)]
    seed: Option<u64>,
    /// override the output directory from the config
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired-modality dataset as JSONL splits
    GenData(Common),
    /// Train a fusion model; writes metrics.csv, checkpoint, routing report
    Train(Common),
    /// Re-evaluate a trained checkpoint on the validation split
    Eval(Common),
    /// Run an experts/length/shots sweep; writes sweep.csv
    Sweep(Common),
    /// Importance distribution and top instances per expert for a checkpoint
    RoutingReport {
        #[command(flatten)]
        common: Common,
        /// which split to score
        #[arg(long, default_value = "val")]
        split: String,
        /// instances listed per expert
        #[arg(long, default_value_t = 8)]
        top_n: usize,
    },
    /// Empirical demos of the adaptivity theorems; exits 4 if a verdict fails
    TheoremDemo(Common),
    /// Finite-difference check of the full fusion loss; exits 3 over tolerance
    GradCheck(Common),
}

fn load_run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.data.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn out_dir<'a>(common: &'a Common, cfg_dir: &'a Path) -> &'a Path {
    common.out.as_deref().unwrap_or(cfg_dir)
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = load_run_config(&common)?;
            let ds = cmd_gen_data(&cfg.data, out_dir(&common, &cfg.output_dir))?;
            println!(
                "wrote {} train / {} val / {} test instances",
                ds.train.len(),
                ds.val.len(),
                ds.test.len()
            );
            Ok(0)
        }
        Command::Train(common) => {
            let cfg = load_run_config(&common)?;
            let out = out_dir(&common, &cfg.output_dir).to_path_buf();
            let art = cmd_train(&cfg, &out)?;
            let last = art.outcome.metrics.last().expect("metrics never empty");
            println!(
                "trained {} epochs; final {} accuracy {:.4}; test accuracy {:.4}",
                art.outcome.completed_epochs, last.split, last.accuracy, art.test_eval.accuracy
            );
            println!("metrics: {}", art.metrics_path.display());
            println!("checkpoint: {}", art.checkpoint_path.display());
            Ok(0)
        }
        Command::Eval(common) => {
            let cfg = load_run_config(&common)?;
            let row = cmd_eval(&cfg, out_dir(&common, &cfg.output_dir))?;
            println!(
                "val loss {:.6} accuracy {:.4} f1 {:.4}",
                row.loss, row.accuracy, row.f1_macro
            );
            Ok(0)
        }
        Command::Sweep(common) => {
            let path = common
                .config
                .as_deref()
                .ok_or_else(|| Error::Config("sweep requires --config".into()))?;
            let mut spec = SweepSpec::load(path)?;
            if let Some(seed) = common.seed {
                spec.seeds = vec![seed];
            }
            let out = out_dir(&common, &spec.base.output_dir).to_path_buf();
            let rows = cmd_sweep(&spec, &out)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!(
                "sweep finished: {} runs, {} failed; {}",
                rows.len(),
                failed,
                out.join("sweep.csv").display()
            );
            Ok(0)
        }
        Command::RoutingReport {
            common,
            split,
            top_n,
        } => {
            let cfg = load_run_config(&common)?;
            let out = out_dir(&common, &cfg.output_dir).to_path_buf();
            let report = cmd_routing_report(&cfg, &out, &split, top_n)?;
            println!(
                "routing report over {} instances: mean purity {:.3}; {}",
                report.split_size,
                report.mean_purity,
                out.join("routing_report.json").display()
            );
            Ok(0)
        }
        Command::TheoremDemo(common) => {
            let mut spec = match &common.config {
                Some(path) => DemoSpec::load(path)?,
                None => DemoSpec::default(),
            };
            if let Some(seed) = common.seed {
                spec.seed = seed;
            }
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("runs/theorem-demo"));
            let (_, verdict) = cmd_theorem_demo(&spec, &out)?;
            if verdict {
                println!("verdict: pass");
                Ok(0)
            } else {
                println!("verdict: fail");
                Ok(4)
            }
        }
        Command::GradCheck(common) => {
            let mut cfg = match &common.config {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| {
                        Error::Config(format!("cannot read {}: {e}", path.display()))
                    })?;
                    serde_json::from_str::<GradCheckConfig>(&text).map_err(|e| {
                        Error::Config(format!(
                            "{}: line {}, column {}: {e}",
                            path.display(),
                            e.line(),
                            e.column()
                        ))
                    })?
                }
                None => GradCheckConfig::default(),
            };
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("runs/grad-check"));
            let report = cmd_grad_check(&cfg, &out)?;
            if report.passed && report.gated_layers_zero {
                Ok(0)
            } else {
                Ok(3)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Error::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Error::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
