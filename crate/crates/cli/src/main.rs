//! `add-sentinel`: fit reference models, calibrate thresholds, score query
//! streams locally or against a running gateway, run bundled simulations and
//! benchmark scoring latency.

mod commands;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use add_sentinel::detector::Variant;
use add_sentinel::formats::KeyValues;
use add_sentinel::gateway::ResponseMode;
use add_sentinel::SentinelError;
use add_sentinel_client::ClientError;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{} ({})", .0, .0.kind())]
    Sentinel(#[from] SentinelError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Sentinel(e) if e.is_numeric() => 3,
            CliError::Client(ClientError::Server { status, .. }) if status.as_u16() == 422 => 3,
            _ => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "add-sentinel", version, about = "Model-stealing query detection toolkit")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command. Flags win over `--config` keys.
#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[arg(long, global = true)]
    window_size: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    tau: Option<f64>,
    /// Accuracy loss tolerated by calibration.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    response_mode: Option<ResponseMode>,
}

impl Overrides {
    /// Config file contents with flag values laid over them.
    pub fn resolve(&self) -> CliResult<KeyValues> {
        let mut kv = match &self.config {
            Some(path) => KeyValues::load(path)?,
            None => KeyValues::default(),
        };
        if let Some(s) = self.seed {
            kv.set("seed", s);
        }
        if let Some(v) = self.variant {
            kv.set("variant", v);
        }
        if let Some(n) = self.window_size {
            kv.set("n", n);
        }
        if let Some(t) = self.tau {
            kv.set("tau", t);
        }
        if let Some(g) = self.gamma {
            kv.set("gamma", g);
        }
        if let Some(m) = self.response_mode {
            kv.set("response_mode", m);
        }
        Ok(kv)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a reference model from a labelled ADDQRY01 stream.
    Fit {
        #[arg(long)]
        input: PathBuf,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
        /// Number of classes; defaults to the largest label plus one.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Pick the smallest threshold that keeps benign accuracy within gamma.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        /// Training features that seed new windows.
        #[arg(long)]
        seeds: PathBuf,
        /// Labelled benign calibration stream.
        #[arg(long)]
        input: PathBuf,
        /// Directory for calibration.txt, sweep.csv and manifest.txt.
        #[arg(long)]
        out: PathBuf,
        /// Keep the smallest qualifying threshold instead of moving one step up.
        #[arg(long)]
        no_nudge: bool,
    },
    /// Score a query stream, one query at a time per account.
    Score {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        /// Send the queries to a running gateway instead of scoring locally.
        #[arg(long)]
        server: Option<String>,
        /// CSV file to write; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a bundled scenario and write streams, verdicts and metrics.
    Simulate {
        /// detection, separation-study or label-subset.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure single-query scoring latency and window memory.
    Bench {
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Directory for bench.txt and manifest.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the gateway over HTTP/JSON.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let kv = cli.overrides.resolve()?;
    match cli.command {
        Command::Fit { input, out, classes } => commands::fit(&input, &out, classes),
        Command::Calibrate {
            model,
            seeds,
            input,
            out,
            no_nudge,
        } => commands::calibrate(&kv, &model, &seeds, &input, &out, !no_nudge),
        Command::Score {
            model,
            seeds,
            input,
            server,
            out,
        } => commands::score(&kv, model, seeds, &input, server, out),
        Command::Simulate { scenario, out } => {
            let mut kv = kv;
            if let Some(s) = scenario {
                kv.set("scenario", s);
            }
            simulate::run(&kv, &out)
        }
        Command::Bench {
            dim,
            classes,
            iterations,
            out,
        } => {
            let mut kv = kv;
            if let Some(d) = dim {
                kv.set("dim", d);
            }
            if let Some(k) = classes {
                kv.set("classes", k);
            }
            if let Some(i) = iterations {
                kv.set("iterations", i);
            }
            commands::bench(&kv, out)
        }
        Command::Serve { model, seeds, listen } => commands::serve(&kv, &model, &seeds, &listen),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
