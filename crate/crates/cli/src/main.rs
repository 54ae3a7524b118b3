mod commands;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use depthdecode_core::evaluation::MetricMode;
use depthdecode_core::training::DepthLossKind;
use depthdecode_core::types::{ChannelMode, RegionSet};

/// Decode depth from simulated or recorded fMRI responses: build benchmarks,
/// pretrain feature extractors, train encoders and decoders, evaluate ranks
/// and analyse voxel depth sensitivity.
#[derive(Debug, Parser)]
#[command(name = "depthdecode", version)]
pub struct Cli {
    /// Print the effective configuration (defaults plus --config and the
    /// DEPTHDECODE_SEED override) as TOML and exit.
    #[arg(long, global = true)]
    pub print_config: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Args, Clone)]
pub struct ConfigArg {
    /// TOML configuration file; missing keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct RunDirArgs {
    /// Run directory for checkpoints, logs and the run manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Skip the run when the directory's manifest matches the current inputs.
    #[arg(long, conflicts_with = "force")]
    pub resume: bool,
    /// Overwrite a previous run in the same directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render random RGBD scenes to raster files.
    GenScenes {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Write the synthetic benchmark dataset with its oracle manifest.
    GenBenchmark {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Pretrain a feature extractor on the shape-and-depth recognition task.
    PretrainFeatures {
        #[arg(long)]
        mode: ChannelMode,
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        run: RunDirArgs,
    },
    /// Train the RGB-to-depth estimator, on rendered scenes or a scene directory.
    TrainDepthEst {
        #[command(flatten)]
        config: ConfigArg,
        /// Directory of RGBD rasters from gen-scenes.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Scenes to render when no data directory is given.
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[command(flatten)]
        run: RunDirArgs,
    },
    /// Phase I: fit the encoder on paired stimuli and responses.
    TrainEnc {
        #[arg(long)]
        mode: ChannelMode,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// Feature extractor checkpoint matching the mode.
        #[arg(long)]
        features: PathBuf,
        #[command(flatten)]
        run: RunDirArgs,
    },
    /// Phase II: train the decoder with the frozen encoder.
    TrainDec {
        #[arg(long)]
        mode: ChannelMode,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        enc: PathBuf,
        /// Ignore unpaired stimuli and train on paired data only.
        #[arg(long)]
        supervised_only: bool,
        #[command(flatten)]
        run: RunDirArgs,
    },
    /// Phase II for an RGB decoder with an estimated-depth loss term.
    TrainDecRgbConstrained {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// RGB feature extractor checkpoint.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        enc: PathBuf,
        #[arg(long)]
        depth_est: PathBuf,
        /// Depth feature extractor used by the perceptual depth term.
        #[arg(long)]
        depth_features: Option<PathBuf>,
        #[arg(long, default_value = "perceptual")]
        loss: DepthLossKind,
        #[command(flatten)]
        run: RunDirArgs,
    },
    /// Rank test-set reconstructions against distractors from the unpaired pool.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dec: PathBuf,
        /// Single-channel extractor that scores depth.
        #[arg(long)]
        depth_features: Option<PathBuf>,
        /// RGB extractor that scores color, for --metric rgb.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Estimator turning RGB reconstructions into depth.
        #[arg(long)]
        depth_est: Option<PathBuf>,
        #[arg(long, default_value = "depth")]
        metric: MetricMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Voxel depth sensitivity through a trained RGBD encoder.
    Vdsi {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        enc: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Stimulus set to probe: unpaired, test or train.
        #[arg(long, default_value = "unpaired")]
        split: commands::Split,
        /// Use at most this many stimuli from the split.
        #[arg(long)]
        samples: Option<usize>,
        /// Skip this many stimuli first, to draw disjoint sets from one split.
        #[arg(long, default_value_t = 0)]
        offset: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Density scatter and agreement of two VDSI reports.
    VdsiScatter {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the pipeline restricted to each region set.
    RoiCompare {
        /// Voxel table assigning each voxel a region.
        #[arg(long)]
        mask: PathBuf,
        /// Stimulus mode of the runs; defaults to the configured mode.
        #[arg(long)]
        mode: Option<ChannelMode>,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        depth_features: PathBuf,
        #[arg(long)]
        depth_est: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "lvc,hvc,all")]
        sets: Vec<RegionSet>,
        #[command(flatten)]
        run: RunDirArgs,
    },
    /// Plot mean rank against candidate-set size for one or more eval reports.
    PlotRanks {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(commands::Failure::Run(e)) => {
            eprintln!("{}", commands::structured_error(&e));
            ExitCode::from(1)
        }
    }
}
