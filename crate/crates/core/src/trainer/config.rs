use serde::{Deserialize, Serialize};

use crate::datasets::AugmentConfig;
use crate::label_gen::DirectionParams;
use crate::losses::LossWeights;
use crate::network::{Architecture, NetworkConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay to zero over all training iterations.
    Cosine,
}

/// Which auxiliary components are trained on top of the segmentation network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub structure: bool,
    pub direction: bool,
    pub refiner: bool,
}

impl Ablation {
    pub const ALL: Self = Self {
        structure: true,
        direction: true,
        refiner: true,
    };
    pub const NONE: Self = Self {
        structure: false,
        direction: false,
        refiner: false,
    };

    /// Parses a comma-separated subset of `structure,direction,refiner`;
    /// `none` or an empty string is the empty set and `all` the full one.
    pub fn parse(s: &str) -> Result<Self> {
        let mut out = Self::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "structure" => out.structure = true,
                "direction" => out.direction = true,
                "refiner" => out.refiner = true,
                "all" => out = Self::ALL,
                "none" => {}
                other => {
                    return Err(Error::Param(format!(
                        "unknown ablation component {other:?} (expected structure, direction, refiner)"
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn describe(&self) -> String {
        let parts: Vec<&str> = [
            (self.structure, "structure"),
            (self.direction, "direction"),
            (self.refiner, "refiner"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join(",")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Architecture, depth, downsample and width. The head flags are
    /// overridden by `ablation`.
    pub network: NetworkConfig,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub ablation: Ablation,
    /// Share of training images held out when no validation set is given.
    pub val_fraction: f64,
    /// Direction label radius.
    pub radius: usize,
    /// Direction label angle step is `pi / angle_step_div`.
    pub angle_step_div: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            weights: LossWeights::default(),
            augment: AugmentConfig::default(),
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
            ablation: Ablation::ALL,
            val_fraction: 0.1,
            radius: 9,
            angle_step_div: 16,
        }
    }
}

/// Flat configuration keys accepted by [`TrainConfig::set`].
pub const CONFIG_KEYS: &[&str] = &[
    "architecture",
    "backbone_depth",
    "downsample",
    "width",
    "input_channels",
    "alpha",
    "beta",
    "gamma",
    "theta_w",
    "crop_size",
    "crops_per_image",
    "hflip_prob",
    "vflip_prob",
    "augment_seed",
    "epochs",
    "batch_size",
    "learning_rate",
    "lr_schedule",
    "seed",
    "ablation",
    "val_fraction",
    "radius",
    "angle_step_div",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Param(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    /// Reduced settings that train in minutes on a CPU: width 16, 64 px crops,
    /// four crops per image and 10 epochs.
    pub fn desk() -> Self {
        Self {
            network: NetworkConfig {
                width: 16,
                ..NetworkConfig::default()
            },
            augment: AugmentConfig {
                crop_size: 64,
                crops_per_image: 4,
                ..AugmentConfig::default()
            },
            epochs: 10,
            ..Self::default()
        }
    }

    /// The network that is actually built: head flags follow `ablation`.
    pub fn network_config(&self) -> NetworkConfig {
        let fcn = self.network.architecture == Architecture::Fcn;
        NetworkConfig {
            enable_structure_head: !fcn && self.ablation.structure,
            enable_direction_head: !fcn && self.ablation.direction,
            enable_refiner: !fcn && self.ablation.refiner,
            ..self.network.clone()
        }
    }

    pub fn direction_params(&self) -> Result<DirectionParams> {
        DirectionParams::from_divisions(self.radius, self.angle_step_div)
    }

    pub fn validate(&self) -> Result<()> {
        self.network_config().validate()?;
        self.weights.validate()?;
        self.augment.validate()?;
        self.direction_params()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Param("epochs and batch_size must be at least 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Param(format!("learning_rate {} must be >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Param(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if self.augment.crop_size % self.network.downsample != 0 {
            return Err(Error::Param(format!(
                "crop_size {} must be a multiple of downsample {}",
                self.augment.crop_size, self.network.downsample
            )));
        }
        Ok(())
    }

    /// Sets one flat key, as used by config files and command-line flags.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key {
            "architecture" => self.network.architecture = value.trim().parse()?,
            "backbone_depth" => self.network.backbone_depth = parse(key, value)?,
            "downsample" => self.network.downsample = parse(key, value)?,
            "width" => self.network.width = parse(key, value)?,
            "input_channels" => self.network.input_channels = parse(key, value)?,
            "alpha" => self.weights.alpha = parse(key, value)?,
            "beta" => self.weights.beta = parse(key, value)?,
            "gamma" => self.weights.gamma = parse(key, value)?,
            "theta_w" => self.weights.theta_w = parse(key, value)?,
            "crop_size" => self.augment.crop_size = parse(key, value)?,
            "crops_per_image" => self.augment.crops_per_image = parse(key, value)?,
            "hflip_prob" => self.augment.hflip_prob = parse(key, value)?,
            "vflip_prob" => self.augment.vflip_prob = parse(key, value)?,
            "augment_seed" => self.augment.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "lr_schedule" => {
                self.lr_schedule = match value.trim().to_ascii_lowercase().as_str() {
                    "cosine" => LrSchedule::Cosine,
                    "constant" => LrSchedule::Constant,
                    other => return Err(Error::Param(format!("unknown lr_schedule {other:?}"))),
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "ablation" => self.ablation = Ablation::parse(value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "radius" => self.radius = parse(key, value)?,
            "angle_step_div" => self.angle_step_div = parse(key, value)?,
            other => return Err(Error::Param(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// All flat keys with their current values, in [`CONFIG_KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let arch = match self.network.architecture {
            Architecture::DiResNet => "diresnet",
            Architecture::Fcn => "fcn",
        };
        let schedule = match self.lr_schedule {
            LrSchedule::Cosine => "cosine",
            LrSchedule::Constant => "constant",
        };
        let values = [
            arch.to_string(),
            self.network.backbone_depth.to_string(),
            self.network.downsample.to_string(),
            self.network.width.to_string(),
            self.network.input_channels.to_string(),
            self.weights.alpha.to_string(),
            self.weights.beta.to_string(),
            self.weights.gamma.to_string(),
            self.weights.theta_w.to_string(),
            self.augment.crop_size.to_string(),
            self.augment.crops_per_image.to_string(),
            self.augment.hflip_prob.to_string(),
            self.augment.vflip_prob.to_string(),
            self.augment.seed.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.learning_rate.to_string(),
            schedule.to_string(),
            self.seed.to_string(),
            self.ablation.describe(),
            self.val_fraction.to_string(),
            self.radius.to_string(),
            self.angle_step_div.to_string(),
        ];
        CONFIG_KEYS.iter().copied().zip(values).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_round_trip_through_set() {
        let mut cfg = TrainConfig::desk();
        cfg.set("ablation", "direction,refiner").unwrap();
        cfg.set("architecture", "fcn").unwrap();
        cfg.set("learning_rate", "5e-4").unwrap();
        let mut rebuilt = TrainConfig::default();
        for (k, v) in cfg.entries() {
            rebuilt.set(k, &v).unwrap();
        }
        assert_eq!(rebuilt, cfg);
    }

    #[test]
    fn ablation_drives_head_flags() {
        let mut cfg = TrainConfig::desk();
        cfg.ablation = Ablation::NONE;
        let net = cfg.network_config();
        assert!(!net.enable_structure_head && !net.enable_direction_head && !net.enable_refiner);
        cfg.ablation = Ablation::parse("structure").unwrap();
        assert!(cfg.network_config().enable_structure_head);
        assert!(Ablation::parse("trees").is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg = TrainConfig::desk();
        assert!(cfg.validate().is_ok());
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk();
        cfg.augment.crop_size = 60;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().set("colour", "red").is_err());
        assert!(TrainConfig::default().set("epochs", "ten").is_err());
    }
}
