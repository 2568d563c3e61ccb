//! `ppcl`: synthesize, perturb, train and evaluate from a run config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad config, flags or inputs; exit code 2.
    Validation(String),
    /// Failure while running a stage; exit code 3.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn record(&self) -> String {
        let (kind, message) = match self {
            CliError::Validation(m) => ("validation", m),
            CliError::Runtime(m) => ("runtime", m),
        };
        serde_json::json!({ "error": kind, "code": self.code(), "message": message }).to_string()
    }
}

/// Maps any displayable module error to a runtime failure.
pub fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "ppcl", version, about = "Perturbation robustness laboratory for intent/slot models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override config keys.
#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; beats PPCL_SEED and the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Prompt format such as structured+sentinel
    #[arg(long, global = true)]
    format: Option<String>,
    /// Perturbation kind; repeat for several
    #[arg(long = "kind", global = true)]
    kinds: Vec<String>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic fixture train/test splits
    Synth {
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Build filtered one-to-one perturbation sets
    Perturb {
        /// Splits to perturb
        #[arg(long = "split", default_values = ["train", "test"])]
        splits: Vec<String>,
    },
    /// Extend the training split with perturbed copies
    Augment {
        #[arg(long)]
        k: Option<usize>,
    },
    /// Supervised fine-tuning from scratch
    TrainSft {
        /// Training split, e.g. an augmented file
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, default_value = "sft")]
        name: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Consistency fine-tuning of a trained checkpoint
    TrainPpcl {
        /// Directory holding model.bin and vocab.txt
        #[arg(long, default_value = "sft")]
        init: String,
        #[arg(long)]
        name: Option<String>,
        /// Loss weights clean,perturbed,js
        #[arg(long, value_parser = commands::parse_weights)]
        weights: Option<ppcl_core::ppcl::LossWeights>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Score a model or a stub on clean/perturbed test pairs
    Eval {
        /// Model directory under out_dir
        #[arg(long, conflicts_with = "responder")]
        model: Option<String>,
        /// copy-oracle or garbage
        #[arg(long)]
        responder: Option<String>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Attach recovery of a mitigated report against a baseline
    Report {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        mitigated: PathBuf,
    },
    /// Reproduce published drop-rate and recovery arithmetic
    OracleCheck,
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Ok(raw) = std::env::var("PPCL_SEED") {
        cfg.seed = raw
            .trim()
            .parse()
            .map_err(|_| CliError::Validation(format!("PPCL_SEED {raw:?} is not an unsigned integer")))?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(f) = &common.format {
        cfg.format = f.clone();
    }
    if !common.kinds.is_empty() {
        cfg.kinds = common.kinds.clone();
    }
    if let Some(t) = common.threshold {
        cfg.threshold = t;
    }
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn run() -> Result<(), CliError> {
    let cli = Cli::try_parse().map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            print!("{e}");
            std::process::exit(0)
        }
        _ => CliError::Validation(e.to_string().lines().next().unwrap_or_default().to_string()),
    })?;
    let cfg = resolve(&cli.common)?;
    commands::dispatch(&cli.command, &cfg)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.code())
        }
    }
}
