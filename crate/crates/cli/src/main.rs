mod commands;
mod config;
mod plot;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pyramid_flow::Error as FlowError;

#[derive(Parser, Debug)]
#[command(name = "pyramid-flow", version, about = "Pyramidal flow matching at desk scale")]
#[command(args_override_self = true, arg_required_else_help = true)]
pub struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Directory for all written files.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// key=value config file with one [section] per subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print stage windows as CSV.
    Schedule(ScheduleArgs),
    /// Monte Carlo check of the corrective noise and jump parameters.
    VerifyRenoise(VerifyArgs),
    /// Train the 2D coupling experiment.
    #[command(name = "train-toy2d")]
    TrainToy2d(ToyArgs),
    /// Train the 16x16 tiny-image model.
    TrainImage(ImageArgs),
    /// Sample from a checkpoint.
    Sample(SampleArgs),
    /// Token and attention-cost arithmetic.
    Tokens(TokenArgs),
    /// Blockwise causal attention mask as CSV.
    Mask(MaskArgs),
    /// Render a trajectory CSV as SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 3)]
    pub stages: usize,
    #[arg(long, default_value_t = pyramid_flow::schedule::DEFAULT_GAMMA, allow_negative_numbers = true)]
    pub gamma: f64,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = pyramid_flow::schedule::DEFAULT_GAMMA, allow_negative_numbers = true)]
    pub gamma: f64,
    /// Start of the finer window.
    #[arg(long, default_value_t = 2.0 / 3.0)]
    pub s: f64,
    /// Number of 2x2 blocks to draw.
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: usize,
}

#[derive(Args, Debug, Clone)]
pub struct OptimArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    /// Hidden widths, e.g. 64,64.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub frequencies: Option<usize>,
    /// Euler steps per window for evaluation samples.
    #[arg(long)]
    pub sample_steps: Option<usize>,
    #[arg(long)]
    pub eval_samples: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ToyArgs {
    /// 1 or 3 target points.
    #[arg(long, default_value_t = 1)]
    pub points: usize,
    /// ours, random, or both.
    #[arg(long, default_value = "both")]
    pub coupling: String,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Args, Debug)]
pub struct ImageArgs {
    #[arg(long, default_value_t = 3)]
    pub stages: usize,
    /// Stop after this many pixel evaluations instead of a step count.
    #[arg(long)]
    pub pixel_budget: Option<u64>,
    #[arg(long)]
    pub dataset_size: Option<usize>,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Euler steps per stage, indexed by stage (finest first).
    #[arg(long, value_delimiter = ',')]
    pub steps: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1.0)]
    pub guidance: f64,
    #[arg(long)]
    pub no_renoise: bool,
}

#[derive(Args, Debug)]
pub struct TokenArgs {
    #[arg(long, default_value_t = 241)]
    pub frames: usize,
    #[arg(long, default_value_t = 768)]
    pub height: usize,
    #[arg(long, default_value_t = 1280)]
    pub width: usize,
    #[arg(long, default_value_t = 8)]
    pub vae_spatial: usize,
    #[arg(long, default_value_t = 8)]
    pub vae_temporal: usize,
    #[arg(long, default_value_t = 2)]
    pub patch: usize,
    #[arg(long, default_value_t = 3)]
    pub stages: usize,
    /// Encode every frame group uniformly instead of the first frame alone.
    #[arg(long)]
    pub no_causal_first_frame: bool,
}

#[derive(Args, Debug)]
pub struct MaskArgs {
    /// Frames including the current one.
    #[arg(long, default_value_t = 3)]
    pub frames: usize,
    /// Latent height and width at full resolution.
    #[arg(long, default_value_t = 4)]
    pub height: usize,
    #[arg(long, default_value_t = 4)]
    pub width: usize,
    #[arg(long, default_value_t = 3)]
    pub stages: usize,
    /// Stage of the current frame.
    #[arg(long, default_value_t = 0)]
    pub stage: usize,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Trajectory CSV with two state columns.
    pub input: PathBuf,
    /// Output file name inside --out-dir; defaults to the input stem.
    #[arg(long)]
    pub output: Option<String>,
}

/// Bad flags, config or inputs. Exit code 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Invalid>().is_some() {
        return 1;
    }
    match err.downcast_ref::<FlowError>() {
        Some(
            FlowError::Dimension(_)
            | FlowError::Argument(_)
            | FlowError::Unsupported(_)
            | FlowError::Format(_),
        ) => 1,
        _ => 2,
    }
}

fn parse(argv: Vec<OsString>) -> Result<Cli, clap::Error> {
    let cli = Cli::try_parse_from(&argv)?;
    match &cli.config {
        None => Ok(cli),
        Some(path) => {
            let merged = config::merge(path, &argv).map_err(|e| {
                clap::Error::raw(clap::error::ErrorKind::ValueValidation, format!("{e}\n"))
            })?;
            Cli::try_parse_from(merged)
        }
    }
}

fn main() -> ExitCode {
    let cli = match parse(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
