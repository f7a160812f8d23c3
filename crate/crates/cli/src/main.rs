//! `seqcov`: design, monitor, analyze, and simulate two-arm group sequential
//! trials that mix un-adjusted and covariate-adjusted analyses.
//!
//! Every run is driven by one TOML config file; identical config and seed
//! produce byte-identical outputs. Exit codes: 0 success, 2 validation
//! failure (config or data), 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use seqcov::Error;

use config::RunConfig;

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn validation(message: String) -> Self {
        Self { code: 2, message }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            // numerical failures: the inputs were admissible but a solve or
            // fit could not be completed
            Error::BracketFailure { .. }
            | Error::RankDeficient { .. }
            | Error::Spending(_)
            | Error::Simulation(_) => 3,
            // everything else is rejected input
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(name = "seqcov", version, about = "Group sequential designs with mixed ANOVA/ANCOVA analyses")]
struct Cli {
    /// TOML run configuration (required for all commands except selftest).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for generated files.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for simulation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve design-time boundaries for a full stage plan.
    Design,
    /// Spend alpha incrementally over observed interim looks.
    Spend,
    /// Adjusted inference for an observed trial dataset.
    Analyze,
    /// Run scenario batches and tabulate operating characteristics.
    Simulate,
    /// Numerical self-checks against closed forms.
    Selftest,
}

fn need<T>(section: Option<T>, name: &str) -> Result<T, CliError> {
    section.ok_or_else(|| CliError::validation(format!("config is missing the [{name}] section")))
}

fn run(cli: &Cli) -> Result<String, CliError> {
    if let Command::Selftest = cli.command {
        return commands::cmd_selftest();
    }
    let config_path = cli.config.as_ref().ok_or_else(|| {
        CliError::validation("--config <path> is required for this command".into())
    })?;
    let cfg = RunConfig::load(config_path)?;
    let config_dir = config_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    match cli.command {
        Command::Design => {
            let mut section = need(cfg.design, "design")?;
            if let Some(seed) = cli.seed {
                section.seed = seed;
            }
            commands::cmd_design(&section, &cli.out)
        }
        Command::Spend => {
            let mut section = need(cfg.spend, "spend")?;
            if let Some(seed) = cli.seed {
                section.seed = seed;
            }
            commands::cmd_spend(&section, &cli.out)
        }
        Command::Analyze => {
            let mut section = need(cfg.analyze, "analyze")?;
            if let Some(seed) = cli.seed {
                section.seed = seed;
            }
            commands::cmd_analyze(&section, &config_dir, &cli.out)
        }
        Command::Simulate => {
            let section = need(cfg.simulate, "simulate")?;
            commands::cmd_simulate(&section, cli.seed, &cli.out)
        }
        Command::Selftest => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            eprintln!("warning: thread pool already initialized; --threads ignored");
        }
    }
    match run(&cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
