mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use stalkfusion::datapipe::FrameSignal;
use stalkfusion::model::Variant;

#[derive(Parser, Debug)]
#[command(name = "stalkfusion", version, about = "Stalking detection from short video clips")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML file with run configuration; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset directory (default: $STALKFUSION_DATA_DIR, then ./data).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Directory for run artifacts.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Frame extent S.
    #[arg(long, global = true)]
    size: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic video dataset.
    Synth {
        #[arg(long)]
        videos: Option<usize>,
        /// rendered or noise
        #[arg(long)]
        signal: Option<FrameSignal>,
        #[arg(long)]
        landmark_noise: Option<f64>,
    },
    /// Extract geometric features, fit the scaler and report flagged frames.
    Preprocess,
    /// Train a model and write its checkpoint and metrics.
    Train {
        /// full, frames_only, features_only or no_lstm
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Early-stopping patience; 0 disables.
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Score a checkpoint on one split of the dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: commands::SplitChoice,
    },
    /// Per-video probability and label for every video in a manifest.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the data directory's manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every layer and the tiny models.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Skip the end-to-end model checks.
        #[arg(long)]
        layers_only: bool,
    },
}

fn effective_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let g = &cli.global;
    let mut c = RunConfig::load(g.config.as_deref())?;
    if let Some(d) = &g.data_dir {
        c.data_dir = Some(d.clone());
    }
    if let Some(d) = &g.run_dir {
        c.run_dir = d.clone();
    }
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if g.size.is_some() {
        c.image_size = g.size;
    }
    match &cli.command {
        Command::Synth {
            videos,
            signal,
            landmark_noise,
        } => {
            if let Some(v) = videos {
                c.synth.videos = *v;
            }
            if let Some(s) = signal {
                c.synth.signal = *s;
            }
            if let Some(n) = landmark_noise {
                c.synth.landmark_noise = *n;
            }
            if c.image_size.is_none() {
                c.image_size = Some(c.synth.image_size);
            }
        }
        Command::Train {
            variant,
            epochs,
            batch_size,
            patience,
            learning_rate,
        } => {
            if let Some(v) = variant {
                c.variant = *v;
            }
            if let Some(e) = epochs {
                c.train.max_epochs = *e;
            }
            if let Some(b) = batch_size {
                c.train.batch_size = *b;
            }
            if let Some(p) = patience {
                c.train.patience = Some(*p).filter(|&p| p > 0);
            }
            if let Some(lr) = learning_rate {
                c.train.adam.learning_rate = *lr;
            }
        }
        _ => {}
    }
    Ok(c.finalize())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = effective_config(&cli)?;
    match cli.command {
        Command::Synth { .. } => commands::synth(&cfg),
        Command::Preprocess => commands::preprocess(&cfg),
        Command::Train { .. } => commands::train(&cfg),
        Command::Eval { checkpoint, split } => commands::eval(&cfg, checkpoint, split),
        Command::Predict { checkpoint, manifest } => commands::predict(&cfg, checkpoint, manifest),
        Command::Gradcheck { seeds, layers_only } => commands::gradcheck(seeds, layers_only),
    }
}

fn main() -> ExitCode {
    // Usage errors exit with status 2 inside clap.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
