//! `chns` command line: synthetic corpora, clustering, training, evaluation,
//! hyper-parameter grids and reports over run directories.

mod commands;
mod config;
mod layout;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failures with a dedicated exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Missing(PathBuf),
    RefusedOverwrite(PathBuf),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Missing(p) => write!(f, "missing input: {}", p.display()),
            CliError::RefusedOverwrite(p) => {
                write!(f, "{} already exists; pass --force to overwrite", p.display())
            }
        }
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Parser)]
#[command(name = "chns", version, about = "Clustering-based hard negative sampling pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Run seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing artifacts and a differing config snapshot.
    #[arg(long, global = true)]
    pub force: bool,
    /// Config override such as `train.epochs=5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic training and evaluation corpora.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Compute voiceprints with a model and cluster the speakers.
    Cluster {
        #[command(flatten)]
        common: Common,
    },
    /// Train the encoder.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score trials on the evaluation corpus.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Sweep cluster count and hard ratio.
    Grid {
        #[command(flatten)]
        common: Common,
    },
    /// Tabulate finished runs and their negative-similarity histograms.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories to compare.
        runs: Vec<PathBuf>,
    },
}

/// 2 config, 3 missing input, 4 refused overwrite, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Config(_) => 2,
                CliError::Missing(_) => 3,
                CliError::RefusedOverwrite(_) => 4,
            };
        }
        if let Some(e) = cause.downcast_ref::<chns::Error>() {
            use chns::Error as E;
            match e {
                E::InvalidConfig(_)
                | E::InvalidSpec(_)
                | E::InvalidBatchSpec(_)
                | E::TooFewPoints { .. }
                | E::ClusterMapMissing
                | E::InsufficientSpeakers { .. }
                | E::InsufficientData(_) => return 2,
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => return 3,
                _ => {}
            }
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::NotFound {
                return 3;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common } => commands::gen_data(&common),
        Command::Cluster { common } => commands::cluster(&common),
        Command::Train { common } => commands::train(&common),
        Command::Eval { common } => commands::eval(&common),
        Command::Grid { common } => commands::grid(&common),
        Command::Report { common, runs } => commands::report(&common, &runs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
