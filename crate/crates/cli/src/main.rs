//! `susylab` binds the laboratory modules into reproducible experiments:
//! structured configs in, deterministic CSV/JSON/binary data out.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RawConfig;

#[derive(Debug)]
pub enum CliError {
    /// Schema or parameter problems; exit code 2.
    Config(String),
    /// Failures inside the numerics; exit code 3.
    Numerical(String),
    /// Filesystem problems; exit code 3.
    Io(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Numerical(_) => "numerical",
            CliError::Io(_) => "io",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numerical(m) | CliError::Io(m) => m,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) | CliError::Io(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "susylab",
    about = "Spectral and stochastic experiments on supersymmetric Kramers-Fokker-Planck type operators"
)]
struct Cli {
    /// Experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides [output] dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for sweeps and ensembles.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Critical points, Morse indices and barrier heights of the phase.
    AnalyzePotential,
    /// Low-lying spectrum, disc counts and projector norms.
    Spectrum,
    /// Arrhenius sweep of the splitting eigenvalue over h.
    Splitting,
    /// Heat-semigroup propagation and return-to-equilibrium fit.
    Evolve,
    /// Stochastic ensembles with invariant-measure / transition statistics.
    Sde,
    /// Numerical verification of the dynamical hypotheses.
    CheckHypotheses,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        // ignore the error when a pool already exists (tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg = RawConfig::parse(&text).map_err(|e| CliError::Config(e.to_string()))?;
    let out = commands::out_dir(&cfg, cli.out.as_deref())?;
    match cli.command {
        Command::AnalyzePotential => commands::cmd_analyze_potential(&cfg, &out),
        Command::Spectrum => commands::cmd_spectrum(&cfg, &out, cli.seed),
        Command::Splitting => commands::cmd_splitting(&cfg, &out, cli.seed),
        Command::Evolve => commands::cmd_evolve(&cfg, &out, cli.seed),
        Command::Sde => commands::cmd_sde(&cfg, &out, cli.seed),
        Command::CheckHypotheses => commands::cmd_check_hypotheses(&cfg, &out, cli.seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = serde_json::json!({
                "error": { "kind": e.kind(), "message": e.message() }
            });
            eprintln!("{payload}");
            ExitCode::from(e.exit_code())
        }
    }
}
