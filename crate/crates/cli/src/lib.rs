//! Command-line driver: configuration, run directories, manifests and the
//! subcommands that chain data generation, training, sampling and evaluation.

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod run;

pub use config::ExperimentConfig;

/// Usage/config problems exit with 2, everything else with 3.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[macro_export]
macro_rules! usage {
    ($($arg:tt)*) => { $crate::CliError::Usage(format!($($arg)*)) };
}

#[derive(Debug, Parser)]
#[command(name = "meddiff", version, about = "Volumetric latent diffusion: data, training, sampling, evaluation")]
pub struct Cli {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic phantoms and undersampled condition pairs.
    GenData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated family names, overriding the config.
        #[arg(long)]
        families: Option<String>,
    },
    /// Train the patch-volume autoencoder (stage 1: patches, stage 2: joint decoder).
    TrainPvae {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Stage-1 checkpoint to start stage 2 from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue an interrupted run of the same stage.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Train the noise estimator on autoencoder latents.
    TrainDiffusion {
        #[arg(long)]
        pvae: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Draw volumes from a trained estimator.
    Sample {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Class name or index.
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a control adapter on (condition, target) pairs.
    TrainControlnet {
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Sample conditioned on undersampled inputs.
    CondSample {
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        base: Option<PathBuf>,
        /// Pairs manifest whose conditions are used (targets enable scoring).
        #[arg(long, conflicts_with = "cond")]
        pairs: Option<PathBuf>,
        /// A single condition volume.
        #[arg(long)]
        cond: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a generated set against a real set.
    Evaluate {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        /// Comma-separated subset of mmd, frechet, ms-ssim.
        #[arg(long, default_value = "mmd,frechet,ms-ssim")]
        metrics: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode and decode one volume with a trained autoencoder.
    Reconstruct {
        #[arg(long)]
        pvae: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainPvae { .. } => "train-pvae",
            Command::TrainDiffusion { .. } => "train-diffusion",
            Command::Sample { .. } => "sample",
            Command::TrainControlnet { .. } => "train-controlnet",
            Command::CondSample { .. } => "cond-sample",
            Command::Evaluate { .. } => "evaluate",
            Command::Reconstruct { .. } => "reconstruct",
        }
    }
}

/// Loads the config, takes the run-directory lock and dispatches.
pub fn execute(cli: Cli) -> CliResult<()> {
    let cfg = ExperimentConfig::load(cli.config.as_deref())?;
    let root = cfg.run_root();
    std::fs::create_dir_all(&root)?;
    let _lock = run::RunLock::acquire(&root)?;
    let mut manifest = run::RunManifest::start(cli.command.name(), &cfg);
    log::info!("run {} config hash {}", manifest.run_id, manifest.config_hash);
    log::debug!("resolved config:\n{}", cfg.to_toml());
    let ctx = commands::Ctx { cfg, root };
    commands::dispatch(&ctx, &cli.command, &mut manifest)?;
    manifest.finish(&ctx.root)?;
    Ok(())
}
