//! `eqhjb`: run one solver pipeline from a TOML config and write CSV/JSON artifacts.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use config::{Command, RunConfig, SolverMode};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("solver error: {0}")]
    Solver(#[from] eqhjb::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Solver(_) | Self::Io(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "eqhjb", version, about = "Equilibrium strategies for time-inconsistent control problems")]
struct Args {
    /// Pipeline to run.
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Riccati–Volterra solver.
    #[arg(long, value_enum)]
    solver: Option<SolverMode>,
}

fn resolve(args: &Args) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(c) = cfg.command {
        if c != args.command {
            return Err(CliError::Config(format!(
                "config is for '{}' but '{}' was requested",
                c.name(),
                args.command.name()
            )));
        }
    }
    cfg.command = Some(args.command);
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = args.solver {
        cfg.solver.mode = mode;
    }
    cfg.validate(args.command)?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let cfg = match resolve(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code());
        }
    };
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("config error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let report = match commands::run(args.command, &cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code());
        }
    };
    let manifest = json!({
        "command": args.command.name(),
        "config": cfg,
        "versions": { "eqhjb": env!("CARGO_PKG_VERSION") },
        "stages": report.stages.iter().map(|s| &s.0).collect::<Vec<_>>(),
        "residuals": report.residuals,
        "results": report.results,
        "checks": report.checks,
        "artifacts": report.artifact_names(),
        "passed": report.passed(),
    });
    if let Err(e) = report.write(&args.out, &manifest) {
        eprintln!("{e}");
        return ExitCode::from(e.exit_code());
    }
    for c in &report.checks {
        println!("{:<24} {}  {}", c.name, if c.pass { "pass" } else { "FAIL" }, c.detail);
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(4)
    }
}
