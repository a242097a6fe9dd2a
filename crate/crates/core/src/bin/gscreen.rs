//! Command-line entry point for the glaucoma-screening pipeline.

use clap::{Parser, Subcommand};
use gscreen_core::cli;
use gscreen_core::config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gscreen", about = "Tri-branch fundus glaucoma screening pipeline")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Crop, contrast-enhance, and cache prior embeddings for a dataset.
    Prepare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints, history, and the best model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (or a stored prediction set) and render plots.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON array of {label, probs[, id]} records to score directly.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Render class-saliency overlays for evaluation samples.
    Cam {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Project fused embeddings to 2-D and export id,x,y,label rows.
    Tsne {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Dump dynamic-window selections for one sample (JSON + overlay).
    DwmDebug {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Index into the eval split.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

fn run(args: Args) -> gscreen_core::Result<()> {
    match args.command {
        Command::Prepare { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let summary = cli::cmd_prepare(&cfg, &out)?;
            println!(
                "prepared {} samples -> {}",
                summary.n_samples,
                summary.manifest.display()
            );
        }
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let summary = cli::cmd_train(&cfg, &out)?;
            println!(
                "trained {} steps (best step {}, val metric {:.4}) -> {}",
                summary.steps,
                summary.best_step,
                summary.best_val_metric,
                summary.checkpoint.display()
            );
        }
        Command::Eval {
            config,
            out,
            checkpoint,
            predictions,
        } => {
            let cfg = RunConfig::load(&config)?;
            let summary =
                cli::cmd_eval(&cfg, checkpoint.as_deref(), predictions.as_deref(), &out)?;
            println!(
                "evaluated {} samples: accuracy {:.4}, macro AUC {}",
                summary.n_samples,
                summary.accuracy,
                summary
                    .macro_auc
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "n/a".into())
            );
        }
        Command::Cam {
            config,
            out,
            checkpoint,
        } => {
            let cfg = RunConfig::load(&config)?;
            let summary = cli::cmd_cam(&cfg, &checkpoint, &out)?;
            println!("rendered {} saliency overlays ({})", summary.rendered, summary.layer);
        }
        Command::Tsne {
            config,
            out,
            checkpoint,
        } => {
            let cfg = RunConfig::load(&config)?;
            let summary = cli::cmd_tsne(&cfg, &checkpoint, &out)?;
            println!(
                "projected {} embeddings -> {}",
                summary.n_samples,
                summary.csv.display()
            );
        }
        Command::DwmDebug {
            config,
            out,
            checkpoint,
            index,
        } => {
            let cfg = RunConfig::load(&config)?;
            let summary = cli::cmd_dwm_debug(&cfg, checkpoint.as_deref(), index, &out)?;
            println!(
                "sample {}: selections -> {}",
                summary.sample_id,
                summary.selections.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
