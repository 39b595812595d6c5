//! Command-line flags. Every flag of a subcommand is also a key of its run
//! manifest, spelled the same way.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use diffnet_core::model::BranchNorm;
use diffnet_core::train::{AdamConfig, DEFAULT_THRESHOLD};
use diffnet_core::{LossConfig, SceneParams, TrainConfig};
use serde::Serialize;

pub const SEED_ENV: &str = "DIFFNET_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "diffnet",
    version,
    about = "Siamese U-Net burned-area change detection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic bitemporal tiles.
    Gen(GenArgs),
    /// Train a model on a directory of tiles.
    Train(TrainArgs),
    /// Predict a burned-area mask for one tile.
    Predict(PredictArgs),
    /// Score predicted masks against ground truth, one row per site.
    Eval(EvalArgs),
    /// Draw a TP/TN/FP/FN confusion map as a PPM image.
    Render(RenderArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::Eval(_) => "eval",
            Command::Render(_) => "render",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Clone, Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GenArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Seed of the first tile; tile i uses seed + i.
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = SceneParams::default().channels)]
    pub channels: usize,
    #[arg(long, default_value_t = SceneParams::default().height)]
    pub height: usize,
    #[arg(long, default_value_t = SceneParams::default().width)]
    pub width: usize,
    #[arg(long, default_value_t = SceneParams::default().burn_fraction_target)]
    pub burn_fraction_target: f64,
    #[arg(long, default_value_t = SceneParams::default().n_scar_blobs)]
    pub n_scar_blobs: usize,
    #[arg(long, default_value_t = SceneParams::default().burn_offset_scale)]
    pub burn_offset_scale: f64,
    #[arg(long, default_value_t = SceneParams::default().seasonal_drift_scale)]
    pub seasonal_drift_scale: f64,
    #[arg(long, default_value_t = SceneParams::default().confuser_blobs)]
    pub confuser_blobs: usize,
    #[arg(long, default_value_t = SceneParams::default().noise_sigma)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = SceneParams::default().max_aspect)]
    pub max_aspect: f64,
    #[arg(long, default_value_t = SceneParams::default().noise_cell)]
    pub noise_cell: usize,
}

impl GenArgs {
    pub fn scene_params(&self) -> SceneParams {
        SceneParams {
            channels: self.channels,
            height: self.height,
            width: self.width,
            burn_fraction_target: self.burn_fraction_target,
            n_scar_blobs: self.n_scar_blobs,
            burn_offset_scale: self.burn_offset_scale,
            seasonal_drift_scale: self.seasonal_drift_scale,
            confuser_blobs: self.confuser_blobs,
            noise_sigma: self.noise_sigma,
            max_aspect: self.max_aspect,
            noise_cell: self.noise_cell,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchNormArg {
    Joint,
    Separate,
}

impl From<BranchNormArg> for BranchNorm {
    fn from(v: BranchNormArg) -> Self {
        match v {
            BranchNormArg::Joint => BranchNorm::Joint,
            BranchNormArg::Separate => BranchNorm::Separate,
        }
    }
}

#[derive(Clone, Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    /// Directory scanned for `.btt` tiles (not recursive).
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log CSV; defaults to the checkpoint path with a `.log.csv` suffix.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Model init and batch sampling seed.
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub base_width: usize,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().patch_size)]
    pub patch_size: usize,
    #[arg(long, default_value_t = AdamConfig::default().lr)]
    pub lr: f64,
    /// Weight of the BCE term; Dice gets 1 − alpha.
    #[arg(long, default_value_t = LossConfig::default().alpha)]
    pub alpha: f64,
    /// `auto` (per-batch negative/positive ratio, clamped to [1, 100]) or a fixed positive weight.
    #[arg(long, default_value = "auto")]
    pub pos_weight: String,
    #[arg(long, default_value_t = LossConfig::default().dice_eps)]
    pub dice_eps: f64,
    #[arg(long, default_value_t = TrainConfig::default().log_every)]
    pub log_every: usize,
    #[arg(long, default_value_t = TrainConfig::default().balance_min_burn)]
    pub balance_min_burn: f64,
    /// Batch-norm statistics across the two dates during training.
    #[arg(long, value_enum, default_value_t = BranchNormArg::Joint)]
    pub branch_norm: BranchNormArg,
}

#[derive(Clone, Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub tile: PathBuf,
    /// Output mask path (BTM1).
    #[arg(long)]
    pub out: PathBuf,
    /// Pixels with probability ≥ threshold are predicted burned.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Clone, Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalArgs {
    /// Predicted masks, one per site.
    #[arg(long, num_args = 1.., required = true)]
    pub pred: Vec<PathBuf>,
    /// Ground truth per site: a tile (its mask is used) or a mask file.
    #[arg(long, num_args = 1.., required = true)]
    pub truth: Vec<PathBuf>,
    /// Site names; default to the prediction file stems.
    #[arg(long, num_args = 1..)]
    pub site: Vec<String>,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct RenderArgs {
    #[arg(long)]
    pub pred: PathBuf,
    /// A tile (its mask is used) or a mask file.
    #[arg(long)]
    pub truth: PathBuf,
    /// Output PPM path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}
