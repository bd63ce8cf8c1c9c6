//! Model, interaction and training configuration.
//!
//! All three sections can be read from one TOML file with `[model]`,
//! `[interaction]` and `[train]` tables; missing keys take the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How the affinity matrix is normalized before mixing guidance features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionNorm {
    /// Normalize over the first index: every column sums to one.
    #[default]
    Column,
    /// Conventional attention: every row sums to one.
    Row,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel width per resolution branch, ordered like `strides`.
    pub backbone_channels: Vec<usize>,
    /// Branch strides: `[4, 16]`, or `[4, 8, 16]` to also recycle mid-level features.
    pub strides: Vec<usize>,
    /// Residual blocks per branch in the feature extractor.
    pub stage1_blocks: usize,
    /// Residual blocks per branch in the mask predictor.
    pub stage2_blocks: usize,
    /// 1-based block on the stride-16 branch where high-level features are tapped.
    pub b_high: usize,
    /// 1-based block on the stride-4 branch where low-level features are tapped.
    pub b_low: usize,
    /// 1-based predictor block after which semantic integration runs.
    pub bt_high: usize,
    /// 1-based predictor block after which texture integration runs.
    pub bt_low: usize,
    pub ck_channels: usize,
    /// Output width of each guidance stem.
    pub guidance_channels: usize,
    pub crop_size: usize,
    pub global_size: usize,
    pub click_radius: usize,
    /// Encode the latest click and the earlier clicks with separate stems.
    pub decouple_guidance: bool,
    pub attention_norm: AttentionNorm,
    pub norm_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_channels: vec![16, 32],
            strides: vec![4, 16],
            stage1_blocks: 3,
            stage2_blocks: 2,
            b_high: 3,
            b_low: 3,
            bt_high: 2,
            bt_low: 2,
            ck_channels: 32,
            guidance_channels: 16,
            crop_size: 64,
            global_size: 96,
            click_radius: 5,
            decouple_guidance: true,
            attention_norm: AttentionNorm::Column,
            norm_groups: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        match self.strides.as_slice() {
            [4, 16] | [4, 8, 16] => {}
            s => return err(format!("strides must be [4, 16] or [4, 8, 16], got {s:?}")),
        }
        if self.backbone_channels.len() != self.strides.len() {
            return err(format!(
                "backbone_channels has {} entries for {} branches",
                self.backbone_channels.len(),
                self.strides.len()
            ));
        }
        if self.norm_groups == 0 {
            return err("norm_groups must be positive".into());
        }
        for &c in self.backbone_channels.iter().chain([&self.guidance_channels]) {
            if c == 0 || c % self.norm_groups != 0 {
                return err(format!(
                    "channel width {c} is not a positive multiple of norm_groups {}",
                    self.norm_groups
                ));
            }
        }
        if self.ck_channels == 0 {
            return err("ck_channels must be positive".into());
        }
        if self.b_high < self.b_low {
            return err(format!("b_high ({}) < b_low ({})", self.b_high, self.b_low));
        }
        if self.bt_high < self.bt_low {
            return err(format!("bt_high ({}) < bt_low ({})", self.bt_high, self.bt_low));
        }
        if self.b_low == 0 || self.b_high > self.stage1_blocks {
            return err(format!(
                "b_low/b_high must lie in 1..={}, got {}/{}",
                self.stage1_blocks, self.b_low, self.b_high
            ));
        }
        if self.bt_low == 0 || self.bt_high > self.stage2_blocks {
            return err(format!(
                "bt_low/bt_high must lie in 1..={}, got {}/{}",
                self.stage2_blocks, self.bt_low, self.bt_high
            ));
        }
        for (name, size) in [("crop_size", self.crop_size), ("global_size", self.global_size)] {
            if size == 0 || size % 16 != 0 {
                return err(format!("{name} must be a positive multiple of 16, got {size}"));
            }
        }
        if self.click_radius == 0 {
            return err("click_radius must be at least 1".into());
        }
        Ok(())
    }

    pub fn low_channels(&self) -> usize {
        self.backbone_channels[0]
    }

    pub fn high_channels(&self) -> usize {
        *self.backbone_channels.last().unwrap()
    }

    pub fn mid_channels(&self) -> Option<usize> {
        (self.strides.len() == 3).then(|| self.backbone_channels[1])
    }

    /// A small configuration used by unit tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            backbone_channels: vec![4, 8],
            stage1_blocks: 2,
            stage2_blocks: 2,
            b_high: 2,
            b_low: 1,
            bt_high: 2,
            bt_low: 1,
            ck_channels: 4,
            guidance_channels: 4,
            crop_size: 32,
            global_size: 32,
            click_radius: 3,
            norm_groups: 2,
            ..Self::default()
        }
    }

    /// [`ModelConfig::tiny`] widened enough to learn the synthetic corpus in minutes.
    pub fn smoke() -> Self {
        Self {
            backbone_channels: vec![8, 16],
            ck_channels: 8,
            guidance_channels: 8,
            crop_size: 48,
            global_size: 64,
            ..Self::tiny()
        }
    }

    /// Default widths with a global input large enough that stage 1 costs
    /// more than one click step.
    pub fn desk() -> Self {
        Self { global_size: 128, crop_size: 48, ..Self::default() }
    }
}

/// Where the next click goes inside the chosen mislabeled region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClickPlacement {
    /// Interior point farthest from the region boundary.
    #[default]
    MaxDistance,
    /// Pixel nearest the region centroid; may fall outside concave regions.
    Centroid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InteractionConfig {
    /// Zoom-In box expansion around clicks and the previous mask.
    pub expansion: f64,
    /// Minimum box side as a fraction of `crop_size`, mapped to source pixels.
    pub min_side_fraction: f64,
    /// Clicks answered on the full image before Zoom-In starts.
    pub zoom_skip_clicks: usize,
    pub max_clicks: usize,
    pub placement: ClickPlacement,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self {
            expansion: 1.4,
            min_side_fraction: 0.4,
            zoom_skip_clicks: 1,
            max_clicks: 20,
            placement: ClickPlacement::MaxDistance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Normalized focal loss only.
    #[default]
    Ritm,
    /// BCE + NFL + boundary NFL.
    FocalClick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub boundary_radius: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    /// Epochs at which the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub max_initial_clicks: usize,
    pub max_iterative_rounds: usize,
    pub loss_mode: LossMode,
    /// Random-proportion ROI sampling; when off every ROI uses `fixed_proportion`.
    pub dynamic_scale: bool,
    pub min_proportion: f64,
    pub max_proportion: f64,
    pub fixed_proportion: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            boundary_radius: 3,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 23,
            decay_epochs: vec![19, 21],
            decay_factor: 0.1,
            batch_size: 8,
            max_initial_clicks: 24,
            max_iterative_rounds: 3,
            loss_mode: LossMode::Ritm,
            dynamic_scale: true,
            min_proportion: 0.3,
            max_proportion: 1.0,
            fixed_proportion: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.boundary_radius == 0 {
            return Err(Error::Config("boundary_radius must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_initial_clicks == 0 || self.max_iterative_rounds == 0 {
            return Err(Error::Config("click counts must be positive".into()));
        }
        let p = [self.min_proportion, self.max_proportion, self.fixed_proportion];
        if p.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) || self.min_proportion > self.max_proportion {
            return Err(Error::Config(format!("invalid ROI proportions {p:?}")));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.learning_rate * self.decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdrnConfig {
    pub model: ModelConfig,
    pub interaction: InteractionConfig,
    pub train: TrainConfig,
}

impl FdrnConfig {
    /// Training preset for the synthetic 96x96 corpus.
    pub fn smoke() -> Self {
        Self {
            model: ModelConfig::smoke(),
            train: TrainConfig {
                learning_rate: 3e-3,
                batch_size: 4,
                epochs: 20,
                decay_epochs: vec![15],
                max_initial_clicks: 8,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn desk() -> Self {
        Self { model: ModelConfig::desk(), ..Self::default() }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.interaction.expansion >= 1.0) || self.interaction.max_clicks == 0 {
            return Err(Error::Config("interaction: expansion >= 1 and max_clicks >= 1".into()));
        }
        Ok(())
    }

    /// Content hash of the canonical serialization.
    pub fn fingerprint(&self) -> String {
        content_hash(self.to_toml_string().as_bytes())
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
