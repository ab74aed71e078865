//! `hemoloop`: push studies, inspect the worklist, evaluate and deploy
//! models, run refinement rounds and the bundled demo campaign.
//!
//! Every result goes to stdout as one JSON object per line; progress and
//! errors go to stderr. Exit codes: 0 ok, 1 push failure, 2 lookup
//! failure, 3 round aborted, 64 usage error.

mod commands;
mod http;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "hemoloop", version, about = "Client for the hemoloop service")]
pub struct Cli {
    /// HTTP API base URL.
    #[arg(long, global = true, env = "HEMOLOOP_SERVER", default_value = "http://127.0.0.1:8080")]
    pub server: String,
    /// Push listener address.
    #[arg(long, global = true, env = "HEMOLOOP_PUSH", default_value = "127.0.0.1:11112")]
    pub push: SocketAddr,
    #[arg(long, global = true, env = "HEMOLOOP_TOKEN")]
    pub token: Option<String>,
    /// Output directory for exported reports.
    #[arg(long, global = true, default_value = "hemoloop-out")]
    pub out: PathBuf,
    /// Overrides the seed of `round` and `demo` configs.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Push slice files or directories, one session per study.
    Push {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[arg(long)]
        site: String,
        #[arg(long, env = "USER", default_value = "cli")]
        user: String,
    },
    /// List case summaries, newest first.
    Worklist {
        #[arg(long)]
        status: Option<String>,
        #[arg(long)]
        partition: Option<String>,
        #[arg(long)]
        site: Option<String>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Evaluate model versions on a partition and write CSV and SVG charts.
    Evaluate {
        #[arg(long = "model", required = true)]
        models: Vec<u64>,
        #[arg(long)]
        partition: String,
    },
    /// Run one refinement round from a JSON round config.
    Round {
        #[arg(long)]
        config: PathBuf,
    },
    /// Deploy a model version.
    Deploy { version: u64 },
    #[command(subcommand)]
    Partition(PartitionCommand),
    /// Run the synthetic three-round campaign in-process under `--out`.
    Demo(DemoArgs),
}

#[derive(Debug, Subcommand)]
pub enum PartitionCommand {
    Create {
        #[arg(long)]
        name: String,
        /// train, holdout_test, online_test or negative_test.
        #[arg(long)]
        role: String,
        /// Comma-separated case ids.
        #[arg(long, value_delimiter = ',', required = true)]
        cases: Vec<u64>,
        #[arg(long)]
        frozen: bool,
    },
    List,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Campaign config JSON; the built-in default when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Push(String),
    #[error("{0}")]
    Lookup(String),
    #[error("{0}")]
    RoundAborted(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Push(_) => 1,
            CliError::Lookup(_) => 2,
            CliError::RoundAborted(_) => 3,
            CliError::Usage(_) => 64,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hemoloop: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
