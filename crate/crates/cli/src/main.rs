mod bench;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use matcha_core::training::WarpKind;
use matcha_core::MatchaError;

use bench::BenchKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-length schedule and batch sizes.
    Full,
    /// Small model and a few thousand iterations.
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    Bbox,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WarpArg {
    Identity,
    Translation,
    Homography,
    Pose,
}

impl From<WarpArg> for WarpKind {
    fn from(w: WarpArg) -> WarpKind {
        match w {
            WarpArg::Identity => WarpKind::Identity,
            WarpArg::Translation => WarpKind::Translation,
            WarpArg::Homography => WarpKind::Homography,
            WarpArg::Pose => WarpKind::Pose,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "matcha", version, about = "Fuse, train and evaluate dense correspondence descriptors")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 runs everything on the calling thread.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = ReportFormat::Json)]
    pub report: ReportFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct DataArgs {
    /// Benchmark directory written by `synth`.
    #[arg(long, env = "MATCHA_DATA_DIR")]
    pub data: PathBuf,
    /// Descriptor role to evaluate.
    #[arg(long, default_value = "unified")]
    pub role: String,
    /// Fusion parameters; the role is then computed from the raw maps.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuse raw feature maps into the unified descriptor.
    Fuse {
        #[arg(long)]
        geometric: PathBuf,
        #[arg(long)]
        semantic: PathBuf,
        #[arg(long, required_unless_present = "no_dino", conflicts_with = "no_dino")]
        dino: Option<PathBuf>,
        /// Skip the object-level map and write the light descriptor.
        #[arg(long)]
        no_dino: bool,
        /// Fusion parameters; freshly initialized from --seed when absent.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the fusion parameters on synthetic scenes.
    Train {
        /// Output directory for parameters, loss log and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Used when the config has no `train` group.
        #[arg(long, value_enum, default_value_t = Preset::Full)]
        preset: Preset,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write `checkpoint.mck` every this many iterations.
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
        /// Stop before this iteration and write a checkpoint.
        #[arg(long)]
        stop_at: Option<u64>,
        /// Print a progress line to stderr every this many iterations.
        #[arg(long, default_value_t = 0)]
        log_every: u64,
    },
    /// Mutual nearest-neighbour matching of two keypoint sets.
    Match {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        keypoints_a: PathBuf,
        #[arg(long)]
        keypoints_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// MMA on homography pairs and pose AUC on calibrated pairs.
    EvalGeometric {
        #[command(flatten)]
        data: DataArgs,
    },
    /// PCK of dense nearest-neighbour transfer.
    EvalSemantic {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        norm: Option<NormArg>,
    },
    /// PCK of first-frame queries tracked through each sequence.
    EvalTemporal {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Similarity of one query point against every cell of a target map.
    Heatmap {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Query position in image pixels of `a`.
        #[arg(long, allow_negative_numbers = true)]
        x: f64,
        #[arg(long, allow_negative_numbers = true)]
        y: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic benchmark directory.
    Synth {
        #[arg(long, env = "MATCHA_DATA_DIR")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = BenchKind::Geometric)]
        kind: BenchKind,
        /// Pairs, or sequences for the temporal kind.
        #[arg(long, default_value_t = 50)]
        entries: usize,
        /// Frames per temporal sequence.
        #[arg(long, default_value_t = 8)]
        frames: usize,
        /// Per-frame motion of temporal sequences, in pixels.
        #[arg(long, num_args = 2, value_names = ["DX", "DY"], default_values_t = [4.0, 2.0], allow_negative_numbers = true)]
        motion: Vec<f64>,
        /// Warp kinds, cycled over pairs.
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [WarpArg::Homography, WarpArg::Pose])]
        warps: Vec<WarpArg>,
    },
}

/// Process exit status of a failed command.
pub fn exit_code(e: &MatchaError) -> u8 {
    match e {
        MatchaError::Format(_) => 3,
        MatchaError::Numerical(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("matcha: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
