//! `rdnsr`: degrade, train, super-resolve, evaluate and ablate.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3
//! numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rdnsr::degrade::{DegradationKind, DegradationSpec, NOISE_LEVEL};

use commands::{CmdResult, Failure, SrOptions};

#[derive(Parser, Debug)]
#[command(name = "rdnsr", version, about = "Residual dense network super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize LR images from a directory of HR PNGs.
    Degrade {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// bi, bd or dn.
        #[arg(long, default_value = "bi")]
        kind: DegradationKind,
        /// Defaults to 2 for bi and 3 otherwise.
        #[arg(long)]
        scale: Option<usize>,
        /// Noise level on the 0-255 scale (dn only).
        #[arg(long, default_value_t = NOISE_LEVEL)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; checkpoints and telemetry go to the run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set train.batch=8`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Super-resolve every PNG in a directory.
    Sr {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// rdn or bicubic.
        #[arg(long, default_value = "rdn")]
        method: String,
        /// Required for bicubic; must match the checkpoint otherwise.
        #[arg(long)]
        scale: Option<usize>,
        /// Average over the eight flips and rotations.
        #[arg(long)]
        ensemble: bool,
    },
    /// PSNR/SSIM of SR images against same-named HR images.
    Eval {
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        hr: PathBuf,
        #[arg(long)]
        scale: usize,
        /// Defaults to `eval-x<scale>.txt` inside the SR directory.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train the eight CM/LRL/GFF combinations and compare them.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn dispatch(command: Command) -> CmdResult {
    match command {
        Command::Degrade { input, output, kind, scale, sigma, seed } => {
            let spec = DegradationSpec {
                kind,
                scale: scale.unwrap_or(if kind == DegradationKind::Bi { 2 } else { 3 }),
                noise_sigma: if kind == DegradationKind::Dn { sigma } else { 0.0 },
                seed,
            };
            spec.validate().map_err(Failure::from)?;
            commands::degrade(&input, &output, spec)
        }
        Command::Train { config, overrides, resume } => commands::train(config.as_deref(), &overrides, resume),
        Command::Sr { input, output, checkpoint, method, scale, ensemble } => {
            commands::super_resolve(&input, &output, &SrOptions { method, checkpoint, scale, ensemble })
        }
        Command::Eval { sr, hr, scale, report } => commands::eval(&sr, &hr, scale, report.as_deref()),
        Command::Ablate { config, overrides } => commands::ablate(config.as_deref(), &overrides),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(commands::ExitClass::Usage as u8),
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.class as u8)
        }
    }
}
