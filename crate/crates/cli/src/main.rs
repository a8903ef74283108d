// NaN-rejecting comparisons like `!(x > 0.0)` are intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod error;
mod provenance;
mod stages;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use permex::fitting::ModelKind;
use permex::sequence::{write_signal_csv, SignalSet};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::provenance::{Provenance, Stage};
use crate::stages::Context;

/// Diffusion MRI ground-truth lab for permeable sphere packings.
///
/// Exit codes: 0 ok, 2 invalid input, 3 missing or invalid upstream stage,
/// 4 numerical failure.
#[derive(Parser)]
#[command(name = "permex", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Rerun the stage even if its outputs are complete.
    #[arg(long, global = true)]
    force: bool,
    /// Print the sweep plan and stage status without running anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Replace every seed in the configuration.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Pack the sphere substrates.
    GenSubstrate,
    /// Run the random walks and store trajectories.
    Simulate,
    /// Synthesize PGSE signals with bootstrap errors.
    Signal,
    /// ADC/AKC time dependence, disorder fits and regime classification.
    Analyze,
    /// Fit the microstructure models to noisy signals.
    Fit,
    /// Emit the plot-ready report tables.
    Report,
    /// Evaluate a model on the configured protocol, in the signal CSV schema.
    Predict {
        #[arg(long)]
        model: ModelKind,
        /// Comma-separated `name=value` pairs, e.g. `r=5,f_i=0.6,d_i_s=2,d_e=1.3,kappa=20`.
        #[arg(long, value_delimiter = ',')]
        params: Vec<String>,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn stage_of(cmd: &Command) -> Option<Stage> {
    Some(match cmd {
        Command::GenSubstrate => Stage::GenSubstrate,
        Command::Simulate => Stage::Simulate,
        Command::Signal => Stage::Signal,
        Command::Analyze => Stage::Analyze,
        Command::Fit => Stage::Fit,
        Command::Report => Stage::Report,
        Command::Predict { .. } => return None,
    })
}

fn predict(config: &ExperimentConfig, model: ModelKind, params: &[String], out: Option<&PathBuf>) -> Result<(), CliError> {
    let mut x = vec![f64::NAN; model.n_params()];
    for kv in params {
        let (name, value) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("parameter `{kv}` is not name=value")))?;
        let k = model
            .param_names()
            .iter()
            .position(|n| *n == name.trim())
            .ok_or_else(|| {
                CliError::Validation(format!(
                    "{} has no parameter `{name}` (expected {})",
                    model.name(),
                    model.param_names().join(", ")
                ))
            })?;
        x[k] = value
            .trim()
            .parse()
            .map_err(|_| CliError::Validation(format!("parameter `{kv}` has a non-numeric value")))?;
    }
    if let Some(k) = x.iter().position(|v| v.is_nan()) {
        return Err(CliError::Validation(format!("missing parameter `{}`", model.param_names()[k])));
    }
    let proto = config.protocol()?;
    let shells = model.shells(&x, &proto).map_err(|e| CliError::context(model.name(), e))?;
    let nd = proto.deltas.len();
    let set = SignalSet::isotropic(&proto, |bi, di| shells[bi * nd + di]);
    let mut buf = Provenance::new(&config.hash(), 0).csv_comment().into_bytes();
    write_signal_csv(&set, &mut buf).map_err(|e| CliError::context("predicted signal", e))?;
    match out {
        Some(p) => std::fs::write(p, buf).map_err(|e| CliError::io(p.display(), e)),
        None => std::io::stdout().write_all(&buf).map_err(|e| CliError::io("stdout", e)),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli
        .common
        .config
        .ok_or_else(|| CliError::Validation("--config <FILE> is required".into()))?;
    let mut config = ExperimentConfig::load(&path)?;
    if let Some(seed) = cli.common.seed_override {
        config.override_seeds(seed);
    }
    if let Some(n) = cli.common.threads {
        permex::par::configure_threads(n).map_err(|e| CliError::Validation(format!("--threads: {e}")))?;
    }
    let Some(stage) = stage_of(&cli.command) else {
        let Command::Predict { model, params, out } = &cli.command else {
            unreachable!()
        };
        return predict(&config, *model, params, out.as_ref());
    };
    let mut ctx = Context::new(config);
    ctx.force = cli.common.force;
    if cli.common.dry_run {
        print!("{}", stages::dry_run_plan(&ctx, stage));
        return Ok(());
    }
    stages::run_stage(&ctx, stage)
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
