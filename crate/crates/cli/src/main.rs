mod commands;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error (bad flag value or inconsistent flags)
  3  I/O error (missing or unwritable file or directory)
  4  integrity error (corrupt, truncated or wrong-version file)
  5  numeric failure (non-finite values, failed gradient check)";

#[derive(Parser)]
#[command(name = "ctlformer", version, about = "Low-dose CT slice denoiser", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic clean/noisy corpus.
    PhantomGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        patients: usize,
        #[arg(long, default_value_t = 20)]
        slices: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 15.0)]
        sigma: f64,
        #[arg(long, default_value_t = 4)]
        streaks: usize,
        #[arg(long, default_value_t = 25.0)]
        streak_amplitude: f64,
    },
    /// Train on every patient except the holdout.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        holdout: String,
        #[arg(long)]
        out: PathBuf,
        /// Total step count; a resumed run continues up to it.
        #[arg(long, default_value_t = 1000)]
        steps: u64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Architecture preset: default, desk, small or tiny.
        #[arg(long, default_value = "default")]
        config: String,
        #[arg(long, default_value_t = 500)]
        checkpoint_every: u64,
        /// Continue from this checkpoint (its seed and optimizer state are used).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Force every gate to 0.5.
        #[arg(long)]
        no_gate: bool,
    },
    /// Tiled inference on one slice (.ctsl in; .ctsl or .pgm out).
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Tile edge; must match the checkpoint (defaults to it).
        #[arg(long)]
        tile: Option<usize>,
        /// Defaults to half the tile.
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value = "cosine")]
        blend: String,
    },
    /// Score the holdout patient and print the metric table.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        holdout: String,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value = "cosine")]
        blend: String,
        /// Comma-separated output instead of the text table.
        #[arg(long)]
        csv: bool,
    },
    /// Finite-difference check of every layer and the full model.
    GradCheck {
        #[arg(long, default_value = "tiny")]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exact parameter count and its distance from the 1.85M budget.
    ParamCount {
        #[arg(long, default_value = "default")]
        config: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
