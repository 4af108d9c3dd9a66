use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use add_sentinel::formats::KeyValues;
use add_sentinel::gateway::EngineConfig;
use add_sentinel_server::{load_engine, serve};
use clap::Parser;

/// Serve the defended query gateway over HTTP/JSON.
#[derive(Debug, Parser)]
#[command(name = "add-sentinel-server", version)]
struct Args {
    /// Reference model (ADDREF01).
    #[arg(long)]
    model: PathBuf,
    /// Training features used to seed new windows (ADDQRY01).
    #[arg(long)]
    seeds: PathBuf,
    /// key=value detector config (variant, n, tau, epsilon, seed, response_mode).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: String,
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let args = Args::parse();
    let config = match &args.config {
        None => Ok(EngineConfig::default()),
        Some(path) => KeyValues::load(path).and_then(|kv| kv.engine_config(EngineConfig::default())),
    };
    let config = match config {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let engine = match load_engine(&args.model, &args.seeds, config) {
        Ok(e) => Arc::new(e),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(if e.is_numeric() { 3 } else { 2 });
        }
    };
    let listener = match tokio::net::TcpListener::bind(&args.listen).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: cannot bind {}: {e}", args.listen);
            return ExitCode::from(2);
        }
    };
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    match serve(listener, engine, shutdown).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
