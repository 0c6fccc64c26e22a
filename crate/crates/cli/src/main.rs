use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dflsim::config::{parse_config, ConfigError};
use dflsim::runner::{self, RunError};

/// Simulate decentralized, federated and centralized training on MNIST
/// with corrupted target-class data.
#[derive(Debug, Parser)]
#[command(name = "dflsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every sweep cell of a config and write CSVs, summary and charts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `section.key=value`, applied over the file; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Rebuild summary.csv and charts from existing per-cell CSVs.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        collateral_class: u8,
        #[arg(long, default_value_t = 9)]
        target_class: u8,
    },
    /// Dump original, exemplar and corrupted images as PGM files.
    InspectCorruption {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Samples per sweep cell.
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Preflight(_) => Failure::Validation(e.to_string()),
            other => Failure::Runtime(error_chain(&other)),
        }
    }
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut msg = e.to_string();
    let mut source = e.source();
    while let Some(s) = source {
        let s_msg = s.to_string();
        if !msg.contains(&s_msg) {
            msg.push_str(": ");
            msg.push_str(&s_msg);
        }
        source = s.source();
    }
    msg
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = parse_config(&config, &overrides)?;
            let out = runner::run(&cfg)?;
            for path in out.cell_csvs.iter().chain(&out.summary).chain(&out.charts) {
                println!("{}", path.display());
            }
        }
        Command::Report {
            input,
            out,
            collateral_class,
            target_class,
        } => {
            let out = runner::report(&input, &out, collateral_class, target_class)?;
            for path in out.summary.iter().chain(&out.charts) {
                println!("{}", path.display());
            }
        }
        Command::InspectCorruption {
            config,
            out,
            overrides,
            limit,
        } => {
            let cfg = parse_config(&config, &overrides)?;
            let files = runner::inspect_corruption(&cfg, &out, limit)?;
            if files.is_empty() {
                log::warn!("no sweep cell corrupts any sample (scheme none or p = 0)");
            }
            for path in files {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
