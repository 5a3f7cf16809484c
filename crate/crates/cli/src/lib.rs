//! Command-line front end for the `negminer` library.
//!
//! Exit codes: 0 success, 1 validation or input error, 2 embedding service failure.

pub mod args;
pub mod commands;
pub mod config;

use std::fmt;

use args::{Cli, Command};
use config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Service,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Validation,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation => 1,
            ErrorKind::Service => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<negminer::Error> for CliError {
    fn from(e: negminer::Error) -> Self {
        let kind = if e.is_service_error() {
            ErrorKind::Service
        } else {
            ErrorKind::Validation
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

fn init_logging(quiet: bool) {
    let level = if quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
}

fn build_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env();
    match &cli.command {
        Command::Embed(a) => a.apply(&mut cfg),
        Command::Mine(a) => {
            a.paths.apply(&mut cfg);
            a.mining.apply(&mut cfg)?;
        }
        Command::Ensemble(a) => a.apply(&mut cfg)?,
        Command::Analyze(a) => a.apply(&mut cfg),
        Command::Sweep(a) => a.apply(&mut cfg)?,
        Command::Validate(a) => a.apply(&mut cfg),
    }
    cfg.mining = cfg.mining_config();
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<commands::Report, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::invalid("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::invalid(format!("cannot start thread pool: {e}")))?;
    }
    let cfg = build_config(cli)?;
    match cli.command {
        Command::Embed(_) => commands::cmd_embed(&cfg),
        Command::Mine(_) => commands::cmd_mine(&cfg),
        Command::Ensemble(_) => commands::cmd_ensemble(&cfg),
        Command::Analyze(_) => commands::cmd_analyze(&cfg),
        Command::Sweep(_) => commands::cmd_sweep(&cfg),
        Command::Validate(_) => commands::cmd_validate(&cfg),
    }
}

/// Runs one invocation and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    init_logging(cli.quiet);
    match dispatch(&cli) {
        Ok(report) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&report.summary).unwrap_or_default());
            }
            if report.clean {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
