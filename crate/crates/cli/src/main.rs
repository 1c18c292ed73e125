mod commands;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sspsd_core::perturbation::VatMode;
use sspsd_core::Error;

#[derive(Debug, Parser)]
#[command(name = "sspsd", version, about = "Semi-supervised parking-slot detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a teacher-student detector on an annotated dataset.
    Train(TrainArgs),
    /// Score a checkpoint or a directory of detections against a dataset.
    Eval(EvalArgs),
    /// Detect slots in every PNG of a directory.
    Infer(InferArgs),
    /// Write a synthetic annotated dataset.
    Synth(SynthArgs),
    /// Print dataset statistics as JSON.
    Stats(StatsArgs),
    /// Run the desk-scale ablation grid and print a comparison table.
    Ablate(AblateArgs),
}

/// Overrides shared by the training-style commands.
#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub ratio_n: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long, value_parser = parse_vat_mode)]
    pub vat_mode: Option<VatMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub deterministic: bool,
}

fn parse_vat_mode(s: &str) -> Result<VatMode, String> {
    match s {
        "robust_min" => Ok(VatMode::RobustMin),
        "aggressive_max" => Ok(VatMode::AggressiveMax),
        _ => Err(format!("expected robust_min or aggressive_max, got {s}")),
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Separate validation dataset; otherwise a fraction of --data is held out.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSON with optional `template` and `eval` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with = "detections", required_unless_present = "detections")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<image>.json` detection files as written by `infer`.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Position tolerance I in pixels.
    #[arg(long)]
    pub i_px: Option<f64>,
    /// Angle tolerance B in degrees.
    #[arg(long)]
    pub b_deg: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of PNG images.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Skip the rendered overlay images.
    #[arg(long)]
    pub no_overlay: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_images: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Render without noise, occlusion or brightness changes.
    #[arg(long)]
    pub clean: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// JSON desk protocol (synthetic data, seeds, base training config).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated variants, or `full` for the whole grid and sweeps.
    #[arg(long, default_value = "ss_psd,supervised,c,cg,s_vat,t_vat")]
    pub variants: String,
    #[command(flatten)]
    pub flags: TrainFlags,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Ok(n) = std::env::var("SSPSD_NUM_WORKERS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: SSPSD_NUM_WORKERS must be a positive integer, got {n:?}");
                return ExitCode::from(1);
            }
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFiniteLoss { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
