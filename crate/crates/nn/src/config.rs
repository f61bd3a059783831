//! Run configuration: loss weights, training schedule, ablation switches and presets.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::{BlockKind, NetworkConfig};
use crate::optim::OptimizerConfig;

/// Switches for the optional components of the adaptation objective and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub detect: bool,
    pub count: bool,
    pub pseudo_label: bool,
    pub cp_aug: bool,
    pub filter: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::all()
    }
}

impl AblationFlags {
    pub const fn all() -> Self {
        Self {
            detect: true,
            count: true,
            pseudo_label: true,
            cp_aug: true,
            filter: true,
        }
    }

    pub const fn none() -> Self {
        Self {
            detect: false,
            count: false,
            pseudo_label: false,
            cp_aug: false,
            filter: false,
        }
    }
}

/// The eight rows of the component ladder, from adversarial-only to everything on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AblationModel {
    I,
    II,
    III,
    IV,
    V,
    VI,
    VII,
    VIII,
}

impl AblationModel {
    pub const ALL: [AblationModel; 8] = [
        AblationModel::I,
        AblationModel::II,
        AblationModel::III,
        AblationModel::IV,
        AblationModel::V,
        AblationModel::VI,
        AblationModel::VII,
        AblationModel::VIII,
    ];

    pub const fn flags(self) -> AblationFlags {
        let (detect, count, pseudo_label, cp_aug, filter) = match self {
            AblationModel::I => (false, false, false, false, false),
            AblationModel::II => (true, false, false, false, false),
            AblationModel::III => (true, true, false, false, false),
            AblationModel::IV => (false, false, true, false, false),
            AblationModel::V => (true, false, true, false, false),
            AblationModel::VI => (true, true, true, false, false),
            AblationModel::VII => (true, true, true, true, false),
            AblationModel::VIII => (true, true, true, true, true),
        };
        AblationFlags {
            detect,
            count,
            pseudo_label,
            cp_aug,
            filter,
        }
    }
}

impl fmt::Display for AblationModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for AblationModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationModel::ALL
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation model {s:?} (expected I..VIII)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub z_max: usize,
    pub batch_size: usize,
    /// Side of the square training crops.
    pub crop: usize,
    pub network: NetworkConfig,
    pub g1_optimizer: OptimizerConfig,
    pub g1_lr: f64,
    /// Power of the polynomial learning-rate decay.
    pub lr_power: f64,
    pub disc_optimizer: OptimizerConfig,
    pub disc_lr: f64,
    /// Channels of the first discriminator layer.
    pub disc_width: usize,
    pub g2_epochs: usize,
    pub g2_lr: f64,
    pub g2_batch: usize,
    /// Crop sides used for counting-network pretraining.
    pub g2_scales: Vec<usize>,
    /// Fraction of `z_max` before pseudo-labels are used.
    pub warmup_fraction: f64,
    /// Side of the pasted window; 0 means half the crop.
    pub cp_patch: usize,
    /// Checkpoint cadence in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Minimum heatmap value of a detected center.
    pub peak_threshold: f64,
    /// Train in double precision (slow; for verification).
    pub double_precision: bool,
    pub seed: u64,
    pub flags: AblationFlags,
}

impl Default for TrainConfig {
    /// Full-scale settings.
    fn default() -> Self {
        Self {
            z_max: 10_000,
            batch_size: 1,
            crop: 512,
            network: NetworkConfig::default(),
            g1_optimizer: OptimizerConfig::sgd(),
            g1_lr: 5e-5,
            lr_power: 0.9,
            disc_optimizer: OptimizerConfig::adam(),
            disc_lr: 1e-4,
            disc_width: 64,
            g2_epochs: 50,
            g2_lr: 1e-4,
            g2_batch: 2,
            g2_scales: vec![512, 768, 1024],
            warmup_fraction: 0.1,
            cp_patch: 0,
            checkpoint_every: 1000,
            peak_threshold: 0.3,
            double_precision: false,
            seed: 0,
            flags: AblationFlags::all(),
        }
    }
}

impl TrainConfig {
    /// Settings sized for a CPU and the 256-pixel synthetic benchmark.
    pub fn desk() -> Self {
        Self {
            z_max: 2000,
            crop: 128,
            network: NetworkConfig {
                base_channels: 16,
                depth: 4,
                block_kind: BlockKind::Standard,
            },
            g1_optimizer: OptimizerConfig::adam(),
            g1_lr: 1e-3,
            disc_width: 16,
            g2_epochs: 30,
            g2_lr: 2e-4,
            g2_scales: vec![128],
            checkpoint_every: 500,
            ..Self::default()
        }
    }

    pub fn cp_patch(&self) -> usize {
        if self.cp_patch == 0 {
            self.crop / 2
        } else {
            self.cp_patch
        }
    }

    pub fn warmup(&self) -> usize {
        (self.warmup_fraction * self.z_max as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.g1_optimizer.validate()?;
        self.disc_optimizer.validate()?;
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        check(self.z_max >= 1, "z_max must be at least 1".into())?;
        check(self.batch_size >= 1, "batch_size must be at least 1".into())?;
        check(
            self.crop >= self.network.granularity() && self.crop % self.network.granularity() == 0,
            format!(
                "crop {} must be a multiple of {}",
                self.crop,
                self.network.granularity()
            ),
        )?;
        for (name, v) in [
            ("g1_lr", self.g1_lr),
            ("disc_lr", self.disc_lr),
            ("g2_lr", self.g2_lr),
            ("lr_power", self.lr_power),
        ] {
            check(v > 0.0 && v.is_finite(), format!("{name} must be positive, got {v}"))?;
        }
        check(self.disc_width >= 1, "disc_width must be positive".into())?;
        check(!self.g2_scales.is_empty(), "g2_scales must not be empty".into())?;
        check(self.g2_batch >= 1, "g2_batch must be at least 1".into())?;
        check(
            self.g2_scales.iter().all(|&s| s >= self.network.granularity()),
            format!("g2_scales must be at least {}", self.network.granularity()),
        )?;
        check(
            (0.0..=1.0).contains(&self.warmup_fraction),
            format!("warmup_fraction must lie in [0, 1], got {}", self.warmup_fraction),
        )?;
        check(
            self.cp_patch() >= 1 && self.cp_patch() <= self.crop,
            format!("cp_patch {} does not fit the crop {}", self.cp_patch(), self.crop),
        )?;
        check(
            self.peak_threshold > 0.0 && self.peak_threshold < 1.0,
            format!("peak_threshold must lie in (0, 1), got {}", self.peak_threshold),
        )
    }
}

/// Everything a training run reads from its config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub weights: LossWeights,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            weights: LossWeights::default(),
            train: TrainConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.train.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
