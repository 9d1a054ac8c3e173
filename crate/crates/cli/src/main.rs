mod config;
mod plot;
mod stages;
mod synth;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::{ConfigError, RunConfig};
use stages::{Run, Stage, StageFailure};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "gridflex", version, about = "Operating envelopes from probabilistic forecasts")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for every artifact.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-year series to <out>/series.csv.
    Synthgen {
        #[arg(long)]
        years: Option<u32>,
        #[arg(long)]
        prosumers: Option<usize>,
    },
    /// Partition the series into training, validation and test days.
    Split,
    /// Fit the ridge point forecaster on the training days.
    FitPoint,
    /// Point-forecast residuals on the validation and test days.
    Residuals,
    /// Train the demand and PV scenario generators.
    TrainCgan,
    /// Sample residual scenarios for the envelope horizon.
    Sample,
    /// Per-slot Gaussian fits of the scenario sets.
    FitGauss,
    /// Solve the chance-constrained OPF for each horizon day.
    SolveEnvelopes,
    /// Monte Carlo violation rates of the solved envelopes.
    Validate,
    /// CRPS and pinball losses on the test days.
    Evaluate,
    /// Emit figure data from a completed run directory.
    PlotData {
        /// Run directory; `--out` when omitted.
        run: Option<PathBuf>,
    },
    /// All stages in order, then manifest.json.
    Pipeline,
}

enum Failure {
    Config(anyhow::Error),
    Stage(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.into())
    }
}

impl From<StageFailure> for Failure {
    fn from(e: StageFailure) -> Self {
        Failure::Stage(e.into())
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = load_config(&cli)?;
    let stage = match &cli.command {
        Command::PlotData { run } => {
            let dir = run.clone().unwrap_or(cli.out.clone());
            let files = plot::plot_data(&dir).map_err(|e| Failure::Stage(e.context("stage plot-data failed")))?;
            for f in files {
                println!("{}", dir.join("plots").join(f).display());
            }
            return Ok(());
        }
        Command::Synthgen { years, prosumers } => {
            if let Some(y) = years {
                cfg.synthgen.years = *y;
            }
            if let Some(p) = prosumers {
                cfg.synthgen.prosumers = *p;
            }
            cfg.validate()?;
            let run = Run::new(cfg, cli.out.clone()).map_err(Failure::Stage)?;
            let path = run.out.join("series.csv");
            run.write_synthetic(&path)
                .map_err(|e| Failure::Stage(e.context("stage synthgen failed")))?;
            println!("{}", path.display());
            return Ok(());
        }
        Command::Split => Stage::Split,
        Command::FitPoint => Stage::FitPoint,
        Command::Residuals => Stage::Residuals,
        Command::TrainCgan => Stage::TrainCgan,
        Command::Sample => Stage::Sample,
        Command::FitGauss => Stage::FitGauss,
        Command::SolveEnvelopes => Stage::SolveEnvelopes,
        Command::Validate => Stage::Validate,
        Command::Evaluate | Command::Pipeline => Stage::Evaluate,
    };
    cfg.validate()?;
    let mut run = Run::new(cfg, cli.out.clone()).map_err(Failure::Stage)?;
    run.run_until(stage)?;
    if matches!(cli.command, Command::Pipeline) {
        run.write_manifest().map_err(|e| Failure::Stage(e.context("writing manifest failed")))?;
    }
    for r in &run.records {
        log::info!("{:<16} {:>8.2} s{}", r.name, r.seconds, if r.cached { " (cached)" } else { "" });
    }
    println!("{}", run.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}
