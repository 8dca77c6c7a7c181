mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drr_core::datasets::Format;
use drr_core::staterep::Variant;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "drr-lab", version, about = "Train and evaluate actor-critic recommenders")]
struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides a single config key, e.g. `--set agent.gamma=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Proceed even if a prerequisite was built with a different configuration.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a raw dataset, write the canonical CSV and the seeded split.
    PrepareData {
        #[arg(long)]
        format: Option<Format>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Fit user and item embeddings on the training split.
    PretrainPmf,
    /// Train an agent against the embedding simulator.
    Train {
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long = "T")]
        horizon: Option<usize>,
        #[arg(long = "M")]
        episodes: Option<usize>,
    },
    /// Rerank held-out items with a trained agent.
    EvalOffline {
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long = "T")]
        horizon: Option<usize>,
        /// Also evaluate popularity and PMF rankings.
        #[arg(long)]
        baselines: bool,
    },
    /// Let a policy interact with the embedding simulator.
    EvalOnline {
        #[arg(long, default_value = "drr")]
        policy: OnlinePolicyKind,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long = "T")]
        horizon: Option<usize>,
        /// LinUCB exploration weight; the configured grid is searched if absent.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Mean rating after runs of consecutive positive or negative ratings.
    AnalyzePatterns {
        #[arg(long)]
        max_run: Option<usize>,
    },
    /// Print the resolved configuration.
    ShowConfig,
    /// Train and evaluate over a list of episode horizons.
    #[command(name = "sweep-T")]
    SweepT {
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long = "T-list", value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum OnlinePolicyKind {
    Drr,
    Linucb,
}

fn base_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_run_flags(cfg: &mut RunConfig, variant: Option<Variant>, horizon: Option<usize>) {
    if let Some(v) = variant {
        cfg.agent.variant = v;
    }
    if let Some(t) = horizon {
        cfg.horizon = t;
    }
}

fn eval_threads() -> Result<usize, CliError> {
    match std::env::var("DRR_LAB_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!("DRR_LAB_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn run(cli: Cli, args: Vec<String>) -> Result<(), CliError> {
    let mut cfg = base_config(&cli)?;
    let ctx = commands::Context { args, force: cli.force, threads: eval_threads()? };
    match cli.command {
        Command::PrepareData { format, input } => {
            if let Some(f) = format {
                cfg.dataset_format = f;
            }
            if let Some(p) = input {
                cfg.dataset_path = p;
            }
            cfg.validate()?;
            commands::prepare_data(&cfg, &ctx)
        }
        Command::ShowConfig => {
            cfg.validate()?;
            print!("{}", cfg.to_text());
            Ok(())
        }
        Command::PretrainPmf => {
            cfg.validate()?;
            commands::pretrain_pmf(&cfg, &ctx)
        }
        Command::Train { variant, horizon, episodes } => {
            apply_run_flags(&mut cfg, variant, horizon);
            if let Some(m) = episodes {
                cfg.episodes = m;
            }
            cfg.validate()?;
            commands::train(&cfg, &ctx)
        }
        Command::EvalOffline { variant, horizon, baselines } => {
            apply_run_flags(&mut cfg, variant, horizon);
            cfg.validate()?;
            commands::eval_offline(&cfg, &ctx, baselines)
        }
        Command::EvalOnline { policy, variant, horizon, alpha } => {
            apply_run_flags(&mut cfg, variant, horizon);
            if let Some(a) = alpha {
                cfg.linucb_alphas = vec![a];
            }
            cfg.validate()?;
            match policy {
                OnlinePolicyKind::Drr => commands::eval_online_drr(&cfg, &ctx),
                OnlinePolicyKind::Linucb => commands::eval_online_linucb(&cfg, &ctx),
            }
        }
        Command::AnalyzePatterns { max_run } => {
            if let Some(m) = max_run {
                cfg.pattern_max_run = m;
            }
            cfg.validate()?;
            commands::analyze_patterns(&cfg, &ctx)
        }
        Command::SweepT { variant, horizons, seeds } => {
            apply_run_flags(&mut cfg, variant, None);
            if let Some(h) = horizons {
                cfg.sweep_horizons = h;
            }
            if let Some(s) = seeds {
                cfg.eval_seeds = s;
            }
            if cfg.sweep_horizons.is_empty() || cfg.sweep_horizons.contains(&0) || cfg.eval_seeds.is_empty() {
                return Err(CliError::Usage("sweep needs horizons >= 1 and at least one seed".into()));
            }
            cfg.validate()?;
            commands::sweep_horizon(&cfg, &ctx)
        }
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("drr-lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
