//! `palsy`: dataset generation, training, LOSO evaluation, ablations, face
//! score fusion and gradient checks.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl From<palsy::Error> for Failure {
    fn from(e: palsy::Error) -> Self {
        match e {
            palsy::Error::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "palsy",
    version,
    about = "Facial palsy video classification with 3D residual networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset and its manifest to `dataset_dir`.
    Generate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train on every clip and write a checkpoint and the loss history.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Leave-one-subject-out evaluation.
    Loso {
        #[arg(long)]
        config: PathBuf,
        /// Folds trained concurrently.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Frame-duration or loss ablation, each a series of LOSO runs.
    Ablate {
        #[arg(value_enum)]
        kind: AblationKind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Print `p_fan δ p_face` for every candidate box.
    FuseScore {
        /// Landmark heatmaps as an `n × rows × cols` PTNS tensor.
        #[arg(long)]
        heatmaps: PathBuf,
        /// One `x y det height p_faster img_width` line per candidate.
        #[arg(long)]
        candidates: PathBuf,
        /// Whitespace-separated visibility weights; all 1 when omitted.
        #[arg(long)]
        gamma: Option<PathBuf>,
    },
    /// Compare 64-bit reverse-mode gradients with central differences.
    Gradcheck {
        /// `all` or one op name.
        #[arg(long, default_value = "all")]
        spec: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = palsy::gradcheck::DEFAULT_INSTANCES)]
        instances: usize,
        /// Harness self-test: perturb this op's analytic gradient.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationKind {
    FrameDuration,
    Loss,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let seed = std::env::var(config::SEED_ENV).ok();
    let result = match cli.command {
        Command::Generate { config } => commands::generate(&config, seed.as_deref()),
        Command::Train { config } => commands::train(&config, seed.as_deref()),
        Command::Loso { config, workers } => commands::loso(&config, seed.as_deref(), workers),
        Command::Ablate {
            kind,
            config,
            workers,
        } => match kind {
            AblationKind::FrameDuration => {
                commands::ablate_frame_duration(&config, seed.as_deref(), workers)
            }
            AblationKind::Loss => commands::ablate_loss(&config, seed.as_deref(), workers),
        },
        Command::FuseScore {
            heatmaps,
            candidates,
            gamma,
        } => commands::fuse_score(&heatmaps, &candidates, gamma.as_deref()),
        Command::Gradcheck {
            spec,
            seed,
            instances,
            corrupt,
        } => commands::gradcheck(&spec, seed, instances, corrupt.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("palsy: config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("palsy: {m}");
            ExitCode::from(1)
        }
    }
}
