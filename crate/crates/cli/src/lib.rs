//! Command-line driver: argument parsing, config resolution and exit codes.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use audiolm::{Error, ErrorKind};
use clap::{Args, Parser, Subcommand};

use crate::commands::AdapterKind;
use crate::config::RunConfig;

pub const SEED_ENV: &str = "AUDIOLM_SEED";

#[derive(Debug, Parser)]
#[command(name = "audiolm", version, about = "Train and evaluate a small audio language model")]
pub struct Cli {
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for all randomness; overrides the config file.
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the staged curriculum, writing checkpoints and metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Ablation preset: last_hidden_only, combined_finetuning or instruct_extra_stage.
        #[arg(long = "ablate")]
        ablate: Vec<String>,
        /// Allow the full-size profile to train.
        #[arg(long)]
        acknowledge_scale: bool,
    },
    /// Write multiple-choice benchmark files.
    BuildBench {
        #[command(flatten)]
        common: Common,
        /// Items per dataset; overrides the config file.
        #[arg(long)]
        items: Option<usize>,
        /// Task families; overrides the config file.
        #[arg(long = "task")]
        tasks: Vec<String>,
    },
    /// Evaluate a checkpoint on benchmark files.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Benchmark JSONL files.
        #[arg(long = "bench", required = true)]
        bench: Vec<PathBuf>,
        /// Answer from ground truth instead of running a model.
        #[arg(long, conflicts_with = "random")]
        oracle: bool,
        /// Answer uniformly at random.
        #[arg(long)]
        random: bool,
    },
    /// Train and evaluate the base run and each ablated variant.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Re-render tables and charts from a stored report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err.kind() {
        ErrorKind::Validation => 2,
        ErrorKind::DataContract => 3,
        ErrorKind::Divergence => 4,
        ErrorKind::Corruption => 5,
    }
}

fn resolve(common: &Common, workers: Option<usize>) -> audiolm::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if workers.is_some() {
        cfg.workers = workers;
    }
    Ok(cfg)
}

fn init_workers(n: Option<usize>) {
    if let Some(n) = n.filter(|&n| n > 0) {
        // A second initialisation in the same process is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Runs one command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> audiolm::Result<String> {
    match cli.command {
        Command::Train { common, ablate, acknowledge_scale } => {
            let mut cfg = resolve(&common, cli.workers)?;
            for a in &ablate {
                cfg.set_ablation(a)?;
            }
            cfg.acknowledge_scale |= acknowledge_scale;
            cfg.validate()?;
            init_workers(cfg.workers);
            let out = commands::cmd_train(&cfg, &cfg.output_dir)?;
            Ok(serde_json::to_string_pretty(&out)?)
        }
        Command::BuildBench { common, items, tasks } => {
            let mut cfg = resolve(&common, cli.workers)?;
            if let Some(n) = items {
                cfg.bench.items = n;
            }
            if !tasks.is_empty() {
                cfg.bench.tasks = tasks;
            }
            init_workers(cfg.workers);
            let summary = commands::cmd_build_bench(&cfg, &cfg.output_dir)?;
            Ok(serde_json::to_string_pretty(&summary)?)
        }
        Command::Eval { common, checkpoint, bench, oracle, random } => {
            let cfg = resolve(&common, cli.workers)?;
            init_workers(cfg.workers);
            let adapter = if oracle {
                AdapterKind::Oracle
            } else if random {
                AdapterKind::Random(cfg.seed)
            } else {
                AdapterKind::Model
            };
            let expected = match &common.config {
                Some(_) => Some(cfg.model()?),
                None => None,
            };
            let report =
                commands::cmd_eval(checkpoint.as_deref(), expected.as_ref(), &bench, adapter, &cfg.output_dir)?;
            Ok(report.table())
        }
        Command::Ablate { common } => {
            let cfg = resolve(&common, cli.workers)?;
            init_workers(cfg.workers);
            let report = commands::cmd_ablate(&cfg, &cfg.output_dir)?;
            Ok(report.table())
        }
        Command::Report { input, out } => {
            let written = commands::cmd_report(&input, &out)?;
            Ok(written.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join("\n"))
        }
    }
}
