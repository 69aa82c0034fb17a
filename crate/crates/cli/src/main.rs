//! Experiment driver for the distillation toolkit: train, distill, attack,
//! evaluate, and the temperature sweep, all reproducible from one config file.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;

/// Usage errors exit with code 2, internal failures with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Internal(String),
}

impl From<distil_core::Error> for CliError {
    fn from(e: distil_core::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "distil",
    about = "Defensive-distillation experiments: training, attacks, and temperature sweeps",
    version
)]
struct Cli {
    /// TOML experiment config; flags below override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Architecture name (mlp-tiny or mnist-small).
    #[arg(long, global = true)]
    arch: Option<String>,

    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true)]
    epochs: Option<usize>,

    /// Training temperature.
    #[arg(long, global = true)]
    temperature: Option<f32>,

    #[arg(long, global = true)]
    train_images: Option<PathBuf>,
    #[arg(long, global = true)]
    train_labels: Option<PathBuf>,
    #[arg(long, global = true)]
    test_images: Option<PathBuf>,
    #[arg(long, global = true)]
    test_labels: Option<PathBuf>,

    /// Stratified training-subset size (0 = full split).
    #[arg(long, global = true)]
    train_count: Option<usize>,
    /// Stratified test-subset size (0 = full split).
    #[arg(long, global = true)]
    test_count: Option<usize>,

    /// Samples attacked per campaign.
    #[arg(long, global = true)]
    sample_count: Option<usize>,

    /// Attack feature budget (0 = 14.3% of the input).
    #[arg(long, global = true)]
    budget: Option<usize>,

    /// Sweep temperatures, comma-separated.
    #[arg(long, global = true, value_delimiter = ',')]
    temperatures: Option<Vec<f32>>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on hard labels; writes model.bin, epochs.csv, manifest.
    Train,
    /// Run the four-step distillation pipeline; writes teacher and student.
    Distill,
    /// JSMA campaign against a saved model; writes campaign.csv, summary.json.
    Attack {
        /// Model file to attack.
        #[arg(long)]
        model: PathBuf,
    },
    /// Accuracy, confidence, and gradient statistics for a saved model.
    Evaluate {
        /// Model file to evaluate.
        #[arg(long)]
        model: PathBuf,
    },
    /// Distill at each temperature and consolidate the trend report.
    Sweep,
}

impl Cli {
    fn effective_config(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.arch {
            cfg.model.architecture = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.temperature {
            cfg.train.temperature = v;
        }
        if let Some(v) = &self.train_images {
            cfg.data.train_images = v.clone();
        }
        if let Some(v) = &self.train_labels {
            cfg.data.train_labels = v.clone();
        }
        if let Some(v) = &self.test_images {
            cfg.data.test_images = v.clone();
        }
        if let Some(v) = &self.test_labels {
            cfg.data.test_labels = v.clone();
        }
        if let Some(v) = self.train_count {
            cfg.data.train_count = v;
        }
        if let Some(v) = self.test_count {
            cfg.data.test_count = v;
        }
        if let Some(v) = self.sample_count {
            cfg.attack.sample_count = v;
        }
        if let Some(v) = self.budget {
            cfg.attack.max_features = v;
        }
        if let Some(v) = &self.temperatures {
            cfg.sweep.temperatures = v.clone();
        }
        Ok(cfg)
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.effective_config()?;
    match &cli.command {
        Command::Train => commands::cmd_train(&cfg),
        Command::Distill => commands::cmd_distill(&cfg),
        Command::Attack { model } => commands::cmd_attack(model, &cfg),
        Command::Evaluate { model } => commands::cmd_evaluate(model, &cfg),
        Command::Sweep => commands::cmd_sweep(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
