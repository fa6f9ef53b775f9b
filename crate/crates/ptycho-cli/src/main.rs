//! `ptycho`: simulate | pretrain | recon | metrics | export.
//!
//! Exit codes: 0 ok, 2 configuration error, 4 numerical divergence,
//! 3 any data/format/io error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ptycho_core::PtychoError;

#[derive(Parser)]
#[command(name = "ptycho", version, about = "Differentiable electron ptychography at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set recon.batch_size=16
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override both simulation and reconstruction seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic 4-D dataset from a phantom.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train object/probe DGPs from a short pixelated run.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Input dataset container.
        #[arg(long)]
        data: PathBuf,
    },
    /// Run a reconstruction (pixelated or DGP per the config).
    Recon {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Shorthand for --set recon.mode=...
        #[arg(long)]
        mode: Option<String>,
        /// Pre-trained object DGP checkpoint.
        #[arg(long)]
        object_dgp: Option<PathBuf>,
        /// Pre-trained probe DGP checkpoint.
        #[arg(long)]
        probe_dgp: Option<PathBuf>,
        /// Resume from a snapshot.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a reconstruction against the dataset's ground truth.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Reconstruction snapshot to evaluate.
        #[arg(long)]
        recon: PathBuf,
    },
    /// Render a container section to PNG with explicit contrast limits.
    Export {
        #[command(flatten)]
        common: Common,
        /// Source container (dataset or snapshot).
        #[arg(long)]
        input: PathBuf,
        /// Section to render; defaults to the reconstructed object phase.
        #[arg(long)]
        section: Option<String>,
    },
}

fn exit_code_for(err: &PtychoError) -> u8 {
    match err {
        PtychoError::Config(_) => 2,
        PtychoError::Divergence(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { common } => commands::simulate(common),
        Command::Pretrain { common, data } => commands::pretrain(common, data),
        Command::Recon { common, data, mode, object_dgp, probe_dgp, resume } => {
            commands::recon(common, data, mode, object_dgp, probe_dgp, resume)
        }
        Command::Metrics { common, data, recon } => commands::metrics(common, data, recon),
        Command::Export { common, input, section } => commands::export(common, input, section),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
