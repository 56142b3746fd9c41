//! `train` arguments: a preset, an optional flat config file, then flags.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use diresnet::TrainConfig;
use ini::Ini;

use crate::{CliResult, Failure, LayoutArg};

#[derive(Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Full-size setup: width 64, 50 epochs, batch 16, 320 px crops.
    Full,
    /// A reduced setup that trains in minutes on one CPU core.
    Desk,
}

/// Training flags. Every config-file key has a flag of the same name with
/// `_` written as `-`; flags win over the file.
#[derive(Args)]
pub struct TrainArgs {
    /// Training data root.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "paired-generic")]
    pub layout: LayoutArg,
    /// Separate validation root; otherwise `val_fraction` of the data is held out.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    /// Output directory for checkpoints, log and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Starting values before the config file and flags are applied.
    #[arg(long, value_enum, default_value = "full")]
    pub preset: Preset,
    /// Flat key = value file using the keys below.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// diresnet or fcn.
    #[arg(long)]
    pub architecture: Option<String>,
    /// Residual backbone depth, 18 or 34.
    #[arg(long)]
    pub backbone_depth: Option<String>,
    /// Minimum downsampling rate, 8 or 16.
    #[arg(long)]
    pub downsample: Option<String>,
    /// Base channel width of the backbone.
    #[arg(long)]
    pub width: Option<String>,
    #[arg(long)]
    pub input_channels: Option<String>,
    /// Weight of the segmentation loss.
    #[arg(long)]
    pub alpha: Option<String>,
    /// Weight of the structure loss.
    #[arg(long)]
    pub beta: Option<String>,
    /// Weight of the direction loss.
    #[arg(long)]
    pub gamma: Option<String>,
    /// Weight of the refinement loss.
    #[arg(long)]
    pub theta_w: Option<String>,
    #[arg(long)]
    pub crop_size: Option<String>,
    #[arg(long)]
    pub crops_per_image: Option<String>,
    #[arg(long)]
    pub hflip_prob: Option<String>,
    #[arg(long)]
    pub vflip_prob: Option<String>,
    #[arg(long)]
    pub augment_seed: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<String>,
    /// cosine or constant.
    #[arg(long)]
    pub lr_schedule: Option<String>,
    /// Seed for initialization, shuffling and augmentation.
    #[arg(long)]
    pub seed: Option<String>,
    /// Enabled auxiliary parts: all, none, or a comma list of
    /// structure, direction, refiner.
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub val_fraction: Option<String>,
    /// Direction label radius.
    #[arg(long)]
    pub radius: Option<String>,
    /// Direction label angle step is pi / n.
    #[arg(long)]
    pub angle_step_div: Option<String>,
}

impl TrainArgs {
    fn flags(&self) -> [(&'static str, &Option<String>); 23] {
        [
            ("architecture", &self.architecture),
            ("backbone_depth", &self.backbone_depth),
            ("downsample", &self.downsample),
            ("width", &self.width),
            ("input_channels", &self.input_channels),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("gamma", &self.gamma),
            ("theta_w", &self.theta_w),
            ("crop_size", &self.crop_size),
            ("crops_per_image", &self.crops_per_image),
            ("hflip_prob", &self.hflip_prob),
            ("vflip_prob", &self.vflip_prob),
            ("augment_seed", &self.augment_seed),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("learning_rate", &self.learning_rate),
            ("lr_schedule", &self.lr_schedule),
            ("seed", &self.seed),
            ("ablation", &self.ablation),
            ("val_fraction", &self.val_fraction),
            ("radius", &self.radius),
            ("angle_step_div", &self.angle_step_div),
        ]
    }

    /// Preset, then config file, then flags.
    pub fn resolve(&self) -> CliResult<TrainConfig> {
        let mut cfg = match self.preset {
            Preset::Full => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk(),
        };
        if let Some(path) = &self.config {
            let file = Ini::load_from_file(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
            for (_, props) in file.iter() {
                for (key, value) in props.iter() {
                    cfg.set(&key.replace('-', "_"), value)
                        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
                }
            }
        }
        for (key, value) in self.flags() {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
