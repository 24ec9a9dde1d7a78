//! `speckind`: dataset generation, both attack pipelines and the
//! experiment runner.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use speckind::Error;

use crate::config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "speckind",
    version,
    about = "SPECK32/64-CBC indistinguishability workbench"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// TOML run configuration; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Cipher rounds (1..=22).
    #[arg(long)]
    rounds: Option<usize>,
    /// k1, k2 or 16 hex digits.
    #[arg(long)]
    key: Option<String>,
    #[arg(long)]
    samples_per_class: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled ciphertext dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the residual distinguisher.
    TrainDl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained distinguisher on a dataset.
    EvalDl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional JSON metrics file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write flatten-layer features of a dataset.
    ExtractFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the boosted classifier; with --val, tune first.
    TrainTl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a boosted classifier on a feature file.
    EvalTl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the configured scenario matrix and transfer sweeps.
    RunExperiment {
        #[command(flatten)]
        common: Common,
        /// Output directory for the report files.
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::TrainDl { common, .. }
            | Command::EvalDl { common, .. }
            | Command::ExtractFeatures { common, .. }
            | Command::TrainTl { common, .. }
            | Command::EvalTl { common, .. }
            | Command::RunExperiment { common, .. } => common,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidRoundCount(_) | Error::InvalidKey(_) => 2,
        Error::Io(_)
        | Error::BadMagic { .. }
        | Error::UnsupportedVersion { .. }
        | Error::Truncated(_)
        | Error::Malformed(_)
        | Error::Json(_) => 3,
        Error::Divergence { .. } => 4,
        Error::Incompatible(_) | Error::Shape(_) => 5,
        _ => 1,
    }
}

fn set_workers() -> speckind::Result<()> {
    let Ok(v) = std::env::var("SPECKIND_WORKERS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Config(format!("SPECKIND_WORKERS={v:?} is not a positive integer"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> speckind::Result<()> {
    set_workers()?;
    let c = cli.command.common();
    let ov = Overrides {
        seed: c.seed,
        rounds: c.rounds,
        key: c.key.clone(),
        samples_per_class: c.samples_per_class,
    };
    let cfg = RunConfig::load(c.config.as_deref(), &ov)?;
    eprintln!("# resolved configuration\n{}", cfg.echo());
    match &cli.command {
        Command::GenData { out, .. } => commands::gen_data(&cfg, out),
        Command::TrainDl {
            train, val, out, ..
        } => commands::train_dl(&cfg, train, val, out),
        Command::EvalDl {
            model, data, out, ..
        } => commands::eval_dl(model, data, out.as_deref()),
        Command::ExtractFeatures {
            model, data, out, ..
        } => commands::extract(model, data, out),
        Command::TrainTl {
            train, val, out, ..
        } => commands::train_tl(&cfg, train, val.as_deref(), out),
        Command::EvalTl {
            model,
            features,
            out,
            ..
        } => commands::eval_tl(model, features, out.as_deref()),
        Command::RunExperiment { out, .. } => commands::run_experiment(&cfg, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
