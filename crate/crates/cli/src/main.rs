mod commands;
mod config;
mod data;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Context;
use config::{apply_overrides, parse, preset, ExperimentConfig, PRESETS};
use error::CliError;
use sca_core::datasets::{Source, DATA_DIR_ENV};

#[derive(Parser)]
#[command(
    name = "sca-lab",
    version,
    about = "Train, attack and analyse self-consistent activation models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured model for every seed.
    Train(Common),
    /// Train on PGD-perturbed minibatches.
    AdvTrain(Common),
    /// Robust accuracy of trained checkpoints over the budget grid.
    AttackEval(WithCheckpoints),
    /// Correlation structure of penultimate activations under attack.
    Analyze(WithCheckpoints),
    /// Train SCA models for each number of inner steps.
    Tsweep(Common),
    /// Download and verify datasets.
    FetchData {
        /// mnist or fmnist; both when omitted.
        #[arg(long = "dataset")]
        datasets: Vec<String>,
        #[arg(long, env = DATA_DIR_ENV)]
        data_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in config.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    preset: Option<String>,
    /// Replaces the configured seed list; repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    desk_scale: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    /// Never download missing data.
    #[arg(long)]
    offline: bool,
    /// Override a config field, e.g. `train.max_epochs=5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct WithCheckpoints {
    #[command(flatten)]
    common: Common,
    /// Directory holding the trained checkpoints; defaults to the output directory.
    #[arg(long)]
    from: Option<PathBuf>,
}

fn resolve(c: &Common) -> Result<Context, CliError> {
    let mut cfg: ExperimentConfig = match (&c.config, &c.preset) {
        (Some(_), Some(_)) => return Err(CliError::Config("give either --config or --preset, not both".into())),
        (Some(path), None) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            parse(&text, &path.display().to_string())?
        }
        (None, Some(name)) => preset(name).ok_or_else(|| CliError::Config(format!("unknown preset {name}")))?,
        (None, None) => return Err(CliError::Config("an experiment needs --config or --preset".into())),
    };
    cfg = apply_overrides(cfg, &c.overrides)?;
    if !c.seeds.is_empty() {
        cfg.seeds = c.seeds.clone();
    }
    if c.desk_scale {
        cfg.desk_scale = true;
    }
    if let Some(out) = &c.out {
        cfg.out = out.display().to_string();
    }
    cfg.validate()?;
    Ok(Context {
        out: PathBuf::from(&cfg.out),
        cfg,
        data_dir: c.data_dir.clone().unwrap_or_else(Source::default_root),
        offline: c.offline,
        workers: c.workers,
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => commands::cmd_train(&resolve(&c)?, false),
        Command::AdvTrain(c) => commands::cmd_train(&resolve(&c)?, true),
        Command::AttackEval(w) => {
            let ctx = resolve(&w.common)?;
            let from = w.from.clone().unwrap_or_else(|| ctx.out.clone());
            commands::cmd_attack_eval(&ctx, &from)
        }
        Command::Analyze(w) => {
            let ctx = resolve(&w.common)?;
            let from = w.from.clone().unwrap_or_else(|| ctx.out.clone());
            commands::cmd_analyze(&ctx, &from)
        }
        Command::Tsweep(c) => commands::cmd_tsweep(&resolve(&c)?),
        Command::FetchData { datasets, data_dir } => {
            commands::cmd_fetch(&data_dir.unwrap_or_else(Source::default_root), &datasets, false)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
