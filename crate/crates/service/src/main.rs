use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use hemoloop_core::registry::Registry;
use hemoloop_service::{start, ServerConfig};

/// Run the push listener and HTTP API over a registry directory.
#[derive(Debug, Parser)]
#[command(name = "hemoloop-server", version)]
struct Args {
    #[arg(long, env = "HEMOLOOP_DATA", default_value = "hemoloop-data")]
    data_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1:11112")]
    push_addr: SocketAddr,
    #[arg(long, default_value = "127.0.0.1:8080")]
    http_addr: SocketAddr,
    /// Static bearer token for the HTTP API.
    #[arg(long, env = "HEMOLOOP_TOKEN")]
    token: Option<String>,
    #[arg(long, default_value_t = 2)]
    workers: usize,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let run = || -> Result<(), Box<dyn std::error::Error>> {
        let registry = Arc::new(Registry::open(&args.data_dir)?);
        let server = start(
            registry,
            ServerConfig {
                push_addr: args.push_addr,
                http_addr: args.http_addr,
                token: args.token.clone(),
                workers: args.workers,
                data_dir: Some(args.data_dir.clone()),
            },
        )?;
        eprintln!("push on {}, http on {}", server.push_addr, server.http_addr);
        server.wait_for_ctrl_c()?;
        server.shutdown();
        Ok(())
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hemoloop-server: {e}");
            ExitCode::FAILURE
        }
    }
}
