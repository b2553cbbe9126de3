//! `wfm`: data generation, training, rollout, evaluation and diagnostics.
//!
//! Exit codes: 0 success, 1 internal or check failure, 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "wfm", version, about = "Wavelet flow matching for PDE emulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct Common {
    /// Plain-text `key=value` file; explicit flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Falls back to `WFM_SEED`, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy PDE dataset.
    GenData(GenData),
    /// Train a velocity network.
    Train(Train),
    /// Autoregressive ensemble rollout from a checkpoint.
    Rollout(Rollout),
    /// Score a forecast against its ground truth.
    Eval(Eval),
    /// Per-sub-band energy report of a field's wavelet decomposition.
    WaveletInspect(WaveletInspect),
    /// Finite-difference check of the network gradients.
    GradCheck(GradCheck),
    /// Time a rollout.
    Profile(Profile),
}

#[derive(Args)]
pub struct GenData {
    #[command(flatten)]
    pub common: Common,
    /// `heat` or `grayscott`.
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long)]
    pub grid: Option<usize>,
    /// Number of trajectories.
    #[arg(long)]
    pub traj: Option<usize>,
    /// Time steps per trajectory.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Wavelet levels the grid must support.
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Heat diffusivity.
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Heat integrator: `spectral` or `finite-difference`.
    #[arg(long)]
    pub integrator: Option<String>,
    /// Gray-Scott feed rate.
    #[arg(long)]
    pub feed: Option<f64>,
    /// Gray-Scott kill rate.
    #[arg(long)]
    pub kill: Option<f64>,
    /// Gray-Scott integrator steps per saved frame.
    #[arg(long)]
    pub substeps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct NetFlags {
    /// Wavelet scales `J`.
    #[arg(long)]
    pub scales: Option<usize>,
    /// U-Net levels (at least `J`).
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub init_dim: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub bottleneck_blocks: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub channel_cap: Option<usize>,
    #[arg(long)]
    pub groups: Option<usize>,
    /// Context frames `L`.
    #[arg(long)]
    pub context: Option<usize>,
}

#[derive(Args)]
pub struct Train {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub net: NetFlags,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// haar, db2, db4 or db6.
    #[arg(long)]
    pub wavelet: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub eta_min: Option<f64>,
    /// Comma-separated per-scale weights.
    #[arg(long)]
    pub lambdas: Option<String>,
    /// `joint` or `per-subband`.
    #[arg(long)]
    pub averaging: Option<String>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub val_windows: Option<usize>,
}

#[derive(Args)]
pub struct Rollout {
    #[command(flatten)]
    pub common: Common,
    /// Training run directory or checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Lead times `T`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Ensemble size `M`.
    #[arg(long)]
    pub members: Option<usize>,
    /// Euler steps `N`.
    #[arg(long)]
    pub euler_steps: Option<usize>,
    /// Trajectory index; defaults to the first validation trajectory.
    #[arg(long)]
    pub traj: Option<usize>,
    /// Index of the current frame; defaults to the context length.
    #[arg(long)]
    pub start: Option<usize>,
}

#[derive(Args)]
pub struct Eval {
    #[command(flatten)]
    pub common: Common,
    /// Forecast directory.
    #[arg(long)]
    pub forecast: Option<PathBuf>,
    /// Defaults to the forecast directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Lead-time windows such as `1:8,9:16`.
    #[arg(long)]
    pub windows: Option<String>,
    /// Comma-separated band edges in cycles per sample.
    #[arg(long)]
    pub bands: Option<String>,
    /// `ensemble-mean` or `member-average`.
    #[arg(long)]
    pub coherence: Option<String>,
}

#[derive(Args)]
pub struct WaveletInspect {
    #[command(flatten)]
    pub common: Common,
    /// Tensor file of shape `(H, W)` or `(C, H, W)`.
    #[arg(long)]
    pub field: Option<PathBuf>,
    #[arg(long)]
    pub wavelet: Option<String>,
    #[arg(long)]
    pub levels: Option<usize>,
}

#[derive(Args)]
pub struct GradCheck {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub net: NetFlags,
    /// Parameters sampled.
    #[arg(long)]
    pub params: Option<usize>,
    /// Input coefficients sampled per scale.
    #[arg(long)]
    pub inputs: Option<usize>,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub kappa_dim: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Perturbs the analytic gradient of this tensor (negative control).
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct Profile {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub members: Option<usize>,
    #[arg(long)]
    pub euler_steps: Option<usize>,
    #[arg(long)]
    pub traj: Option<usize>,
    #[arg(long)]
    pub label: Option<String>,
    /// Baseline profile report; adds the speedup `T_baseline / T_this`.
    #[arg(long)]
    pub speedup: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<config::Usage>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<wfm_core::Error>() {
            return match e {
                wfm_core::Error::InvalidArgument(_)
                | wfm_core::Error::Divisibility { .. }
                | wfm_core::Error::UnsupportedOrder(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Rollout(a) => commands::rollout(a),
        Command::Eval(a) => commands::eval(a),
        Command::WaveletInspect(a) => commands::wavelet_inspect(a),
        Command::GradCheck(a) => commands::grad_check(a),
        Command::Profile(a) => commands::profile(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
