use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{DatasetId, DATA_ROOT_ENV};
use crate::model::EncoderConfig;
use crate::nn::resnet::ResNetLayout;
use crate::nn::AdamConfig;
use crate::patching::{default_patch_size, AugmentConfig, ColorJitter, PatchMode, DEFAULT_REJECTION_ATTEMPTS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Resnet32,
    Resnet34,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
}

/// Complete description of one pretraining run. Every key is flat so that
/// configs stay diffable; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetId,
    /// Images per mini-batch.
    #[serde(default = "defaults::m")]
    pub m: usize,
    /// Augmented views per image.
    #[serde(default = "defaults::k")]
    pub k: usize,
    /// Patches per image; 0 disables spatial reasoning.
    #[serde(default = "defaults::n")]
    pub n: usize,
    /// Defaults to 13, 24 or 36 for 32, 64 or 96 pixel images.
    #[serde(default)]
    pub patch_size_px: Option<usize>,
    #[serde(default)]
    pub patch_mode: PatchMode,
    #[serde(default = "defaults::epochs")]
    pub epochs: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,

    /// Defaults to ResNet-34 for STL-10 and ResNet-32 otherwise.
    #[serde(default)]
    pub architecture: Option<Architecture>,
    /// Shrinks the CIFAR-style encoder; unset means the standard 5 blocks of width 16.
    #[serde(default)]
    pub blocks_per_stage: Option<usize>,
    #[serde(default)]
    pub base_width: Option<usize>,

    /// Falls back to the dataset-root environment variable.
    #[serde(default)]
    pub data_root: Option<PathBuf>,
    /// Use a seeded subset of this many pretraining images.
    #[serde(default)]
    pub pretrain_limit: Option<usize>,
    #[serde(default = "defaults::checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default = "defaults::workers")]
    pub workers: usize,
    #[serde(default = "defaults::rejection_max_attempts")]
    pub rejection_max_attempts: usize,

    #[serde(default = "defaults::crop_prob")]
    pub crop_prob: f64,
    #[serde(default = "defaults::crop_scale_min")]
    pub crop_scale_min: f64,
    #[serde(default = "defaults::flip_prob")]
    pub flip_prob: f64,
    #[serde(default = "defaults::jitter_prob")]
    pub jitter_prob: f64,
    #[serde(default = "defaults::jitter")]
    pub jitter_brightness: f32,
    #[serde(default = "defaults::jitter")]
    pub jitter_contrast: f32,
    #[serde(default = "defaults::jitter")]
    pub jitter_saturation: f32,
    #[serde(default = "defaults::jitter_hue")]
    pub jitter_hue: f32,
    #[serde(default = "defaults::grayscale_prob")]
    pub grayscale_prob: f64,

    /// Hash of the experiment manifest that produced this run, if any.
    #[serde(default)]
    pub manifest_hash: Option<String>,
}

mod defaults {
    pub fn m() -> usize {
        64
    }
    pub fn k() -> usize {
        4
    }
    pub fn n() -> usize {
        2
    }
    pub fn epochs() -> u64 {
        200
    }
    pub fn learning_rate() -> f64 {
        1e-3
    }
    pub fn checkpoint_every() -> u64 {
        1
    }
    pub fn workers() -> usize {
        1
    }
    pub fn rejection_max_attempts() -> usize {
        super::DEFAULT_REJECTION_ATTEMPTS
    }
    pub fn crop_prob() -> f64 {
        1.0
    }
    pub fn crop_scale_min() -> f64 {
        0.08
    }
    pub fn flip_prob() -> f64 {
        0.5
    }
    pub fn jitter_prob() -> f64 {
        0.8
    }
    pub fn jitter() -> f32 {
        0.8
    }
    pub fn jitter_hue() -> f32 {
        0.2
    }
    pub fn grayscale_prob() -> f64 {
        0.2
    }
}

impl RunConfig {
    /// Full-scale defaults for `dataset`.
    pub fn new(dataset: DatasetId, output_dir: impl Into<PathBuf>) -> Self {
        let toml = format!("dataset = \"{dataset}\"\noutput_dir = \"\"\n");
        let mut c: Self = toml::from_str(&toml).expect("defaults parse");
        c.output_dir = output_dir.into();
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size_px
            .unwrap_or_else(|| default_patch_size(self.dataset.image_side()))
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let arch = self.architecture.unwrap_or(if self.dataset == DatasetId::Stl10 {
            Architecture::Resnet34
        } else {
            Architecture::Resnet32
        });
        let architecture = match arch {
            Architecture::Resnet34 => ResNetLayout::ResNet34,
            Architecture::Resnet32 => ResNetLayout::Cifar {
                blocks_per_stage: self.blocks_per_stage.unwrap_or(5),
                base_width: self.base_width.unwrap_or(16),
            },
        };
        EncoderConfig {
            architecture,
            input_size: self.dataset.image_side(),
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            crop_prob: self.crop_prob,
            crop_scale: (self.crop_scale_min, 1.0),
            flip_prob: self.flip_prob,
            jitter_prob: self.jitter_prob,
            jitter: ColorJitter {
                brightness: self.jitter_brightness,
                contrast: self.jitter_contrast,
                saturation: self.jitter_saturation,
                hue: self.jitter_hue,
            },
            grayscale_prob: self.grayscale_prob,
            ..AugmentConfig::default()
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn data_root(&self) -> Result<PathBuf> {
        match &self.data_root {
            Some(p) => Ok(p.clone()),
            None => std::env::var_os(DATA_ROOT_ENV)
                .map(PathBuf::from)
                .ok_or_else(|| Error::Config(format!("no data_root in config and {DATA_ROOT_ENV} is unset"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k < 2 {
            return bad(format!("k = {} but at least 2 augmentations are required", self.k));
        }
        if self.m < 2 {
            return bad(format!(
                "m = {}: negatives wrap onto the same image with a single image per batch",
                self.m
            ));
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.checkpoint_every < 1 {
            return bad("checkpoint_every must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.n > 0 {
            let side = self.dataset.image_side();
            let max = crate::patching::ImageGeometry::square(side).max_non_overlapping_size();
            let s = self.patch_size();
            if s == 0 || s > max {
                return bad(format!(
                    "patch_size_px {s} admits no two non-overlapping patches in {side}x{side}; maximum feasible size is {max}"
                ));
            }
        }
        for (name, p) in [
            ("crop_prob", self.crop_prob),
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if !(self.crop_scale_min > 0.0 && self.crop_scale_min <= 1.0) {
            return bad(format!("crop_scale_min {} not in (0, 1]", self.crop_scale_min));
        }
        self.encoder_config().validate()
    }
}
