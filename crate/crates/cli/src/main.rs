use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use sepda_cli::commands::{run, Command};
use sepda_cli::config::{ExperimentKind, RunConfig};

#[derive(Parser)]
#[command(name = "sepda", version, about = "Stochastic image EPDiff: sampling, moments and noise estimation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Shooting registration of the image onto the target.
    Register,
    /// Monte Carlo endpoint images of the stochastic system.
    Sample,
    /// Endpoint of the first-order moment equations.
    Moments,
    /// Fit noise amplitudes to a sample directory.
    Estimate,
    /// Full pipeline: register, sample, estimate, report.
    Experiment {
        /// Overrides `experiment.kind` from the config.
        #[arg(value_enum)]
        kind: Option<Kind>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    A,
    B,
}

fn main() -> ExitCode {
    match try_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn try_main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_toml("")?,
    };
    let cmd = match cli.command {
        Cmd::Register => Command::Register,
        Cmd::Sample => Command::Sample,
        Cmd::Moments => Command::Moments,
        Cmd::Estimate => Command::Estimate,
        Cmd::Experiment { kind } => {
            if let Some(k) = kind {
                cfg.experiment.kind = match k {
                    Kind::A => ExperimentKind::A,
                    Kind::B => ExperimentKind::B,
                };
            }
            Command::Experiment
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        anyhow::ensure!(n >= 1, "--workers must be at least 1");
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("starting worker pool")?;
    pool.install(|| run(cmd, &cfg, &cli.out))
}
