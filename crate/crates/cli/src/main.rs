//! `protoeeg` command-line driver.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failures, grouped by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Exit 1: bad arguments or configuration.
    Usage(String),
    /// Exit 2 or 3 depending on the error kind.
    Core(protoeeg::Error),
}

impl From<protoeeg::Error> for CliError {
    fn from(e: protoeeg::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use protoeeg::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e {
                E::Config(_) => 1,
                E::Format { .. } | E::Io(_) | E::Json(_) | E::Reference(_) | E::Provenance(_) | E::Index(_) | E::Dimension(_) => 2,
                E::Numeric(_) | E::Degenerate(_) | E::UndefinedMetric(_) | E::Contract(_) => 3,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "protoeeg", version, about = "Interpretable prototype network for EEG spike detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Output directory; nothing is written outside it.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file layered over the built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed stored in the config's `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Config override `key.path=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-annotator dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of windows.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Notch, high-pass and resample every window of a dataset.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Reassign train/val/test splits.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the full training schedule.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Total number of epochs.
        #[arg(long)]
        epochs: Option<u32>,
    },
    /// Binary AUROC with bootstrap intervals.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model file or a directory holding model.pegm.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also report AUROC without 3, 4 and 5 vote windows.
        #[arg(long)]
        filtered: bool,
    },
    /// Project prototypes onto their nearest training windows.
    Push {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write case-based explanation reports.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample id to explain; may be repeated. Defaults to a random draw.
        #[arg(long = "sample")]
        samples: Vec<u64>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Per-prototype quality summary.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("PROTOEEG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("PROTOEEG_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn dispatch(command: Command) -> Result<(), CliError> {
    configure_threads()?;
    match command {
        Command::Synth { common, n } => commands::synth(&common, n),
        Command::Preprocess { common, data } => commands::preprocess(&common, &data),
        Command::Split { common, data } => commands::split(&common, &data),
        Command::Train { common, data, epochs } => commands::train(&common, &data, epochs),
        Command::Eval {
            common,
            model,
            data,
            filtered,
        } => commands::eval(&common, &model, &data, filtered),
        Command::Push { common, model, data } => commands::push(&common, &model, &data),
        Command::Explain {
            common,
            model,
            data,
            samples,
            top_k,
        } => commands::explain(&common, &model, &data, &samples, top_k),
        Command::Report { common, model, data } => commands::report(&common, &model, &data),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("protoeeg: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
