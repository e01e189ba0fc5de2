mod commands;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use implicit_seq_core::presets::Precision;
use implicit_seq_core::training::GradientMode;

#[derive(Parser, Debug)]
#[command(name = "implicit-seq-lab", version, about = "Implicit sequence models on word problems")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Experiment config as JSON (for example a previous config.resolved.json).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Named preset to start from instead of a config file.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true, env = "IMPLICIT_SEQ_LAB_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Run directory for every output of the command.
    #[arg(long, global = true, default_value = "runs/latest")]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum GradientModeArg {
    Phantom,
    Unrolled,
    Explicit,
}

impl From<GradientModeArg> for GradientMode {
    fn from(g: GradientModeArg) -> Self {
        match g {
            GradientModeArg::Phantom => GradientMode::Phantom,
            GradientModeArg::Unrolled => GradientMode::Unrolled,
            GradientModeArg::Explicit => GradientMode::Explicit,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// List the built-in presets.
    Presets,
    /// Print the resolved config without running anything.
    ShowConfig { overrides: Vec<String> },
    /// Write training and evaluation samples of the configured distribution.
    GenData {
        /// Training samples to write (streams 0..n).
        #[arg(long, default_value_t = 1024)]
        samples: usize,
        overrides: Vec<String>,
    },
    /// Train with the configured curriculum, then evaluate.
    Train {
        /// Use this gradient mode in every phase.
        #[arg(long, value_enum)]
        gradient_mode: Option<GradientModeArg>,
        /// Continue from a checkpoint written by an earlier run of the same plan.
        #[arg(long)]
        resume: Option<PathBuf>,
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint over the configured sweep.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        overrides: Vec<String>,
    },
    /// Compare the closed-form state Jacobian with autodiff through the iteration.
    JacobianCheck {
        /// Trained checkpoint; random initializations are used when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Random-init seeds, counted up from the config seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Tokens processed before the differentiated one.
        #[arg(long, default_value_t = 8)]
        prefix: usize,
        overrides: Vec<String>,
    },
    /// Token agreement between simultaneous and sequential solving.
    DualityCheck {
        #[arg(long)]
        checkpoint: PathBuf,
        overrides: Vec<String>,
    },
    /// Time sequential against parallel scans over a range of lengths.
    ScanBench {
        #[arg(long, default_value_t = 10)]
        min_log2: u32,
        #[arg(long, default_value_t = 20)]
        max_log2: u32,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Finite-difference check of every primitive and one cell step.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
