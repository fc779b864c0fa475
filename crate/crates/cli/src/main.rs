//! `styleflow`: train, translate, sample, evaluate and invertibility check.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "styleflow", version, about = "Content-fixed image-to-image translation with invertible flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from this checkpoint instead of starting fresh.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Override the aligned-style channel fraction.
        #[arg(long)]
        k: Option<f64>,
        /// Override the run seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Translate images toward the style of a reference image.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source image or directory of images.
        #[arg(long)]
        src: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate images with styles sampled from a target domain's prior.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run configuration naming the target domains.
        #[arg(long)]
        config: PathBuf,
        /// Source image or directory of images.
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score translated images by SSIM to the source and style distance to the reference.
    Evaluate {
        /// Directory of translated images.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Report file; defaults to `report.jsonl` inside `--out`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Encoder weights or `stub:<seed>`; defaults to the checkpoint's encoder.
        #[arg(long)]
        encoder: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Measure the round-trip error of a network on random inputs.
    InvertCheck {
        /// Checkpoint path, or `fresh` for a newly initialized default network.
        #[arg(long)]
        checkpoint: String,
        /// Input shape as `B,C,H,W`.
        #[arg(long, default_value = "1,3,64,64")]
        shape: String,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            checkpoint,
            k,
            seed,
        } => commands::train(&config, checkpoint.as_deref(), k, seed),
        Command::Translate {
            checkpoint,
            src,
            reference,
            out,
        } => commands::translate(&checkpoint, &src, &reference, &out),
        Command::Sample {
            checkpoint,
            config,
            src,
            domain,
            n,
            temperature,
            seed,
            out,
        } => commands::sample(&commands::SampleArgs {
            checkpoint: &checkpoint,
            config: &config,
            src: &src,
            domain: &domain,
            n,
            temperature,
            seed,
            out: &out,
        }),
        Command::Evaluate {
            out,
            src,
            reference,
            report,
            encoder,
            checkpoint,
        } => commands::evaluate(&out, &src, &reference, report, encoder, checkpoint.as_deref()),
        Command::InvertCheck {
            checkpoint,
            shape,
            tolerance,
            seed,
        } => commands::invert_check(&checkpoint, &shape, tolerance, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", commands::error_line(&e));
            ExitCode::FAILURE
        }
    }
}
