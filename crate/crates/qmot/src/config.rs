//! Runtime configuration: model shape, loss weights, training schedule and
//! synthetic-scene parameters. Loaded from a sectioned `key = value` (TOML)
//! document; every field has a desk-scale default.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Model and tracking-protocol configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Content feature dimension `d`.
    pub feature_dim: usize,
    /// Number of detection queries.
    pub n_det: usize,
    /// Attention head count; also the number of gate groups in the
    /// refinement module. Must divide `feature_dim`.
    pub d_head: usize,
    /// Appearance/disappearance score threshold `sigma`.
    pub sigma: f64,
    /// Frames a lost track is kept before removal.
    pub n_keep: usize,
    /// Max historical queries per track.
    pub n_max: usize,
    /// Decoder layer count.
    pub num_decoders: usize,
    /// Refinement-module count; `None` means `num_decoders - 1` (one
    /// between each adjacent pair of decoders, none before the first).
    pub num_irms: Option<usize>,
    /// Training clip length `T`.
    pub clip_length: usize,
    /// Non-background class count.
    pub num_classes: usize,
    /// Input image width/height; the encoder downsamples by 8.
    pub image_width: usize,
    pub image_height: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            feature_dim: 64,
            n_det: 20,
            d_head: 8,
            sigma: 0.6,
            n_keep: 5,
            n_max: 3,
            num_decoders: 3,
            num_irms: None,
            clip_length: 4,
            num_classes: 1,
            image_width: 64,
            image_height: 64,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.feature_dim % self.d_head != 0 {
            return Err(Error::Config(format!(
                "feature_dim {} must be a positive multiple of d_head {}",
                self.feature_dim, self.d_head
            )));
        }
        if self.n_max < 1 {
            return Err(Error::Config("n_max must be >= 1".into()));
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(Error::Config(format!(
                "sigma must lie in (0,1), got {}",
                self.sigma
            )));
        }
        if self.num_decoders < 1 {
            return Err(Error::Config("num_decoders must be >= 1".into()));
        }
        if let Some(k) = self.num_irms {
            if k > self.num_decoders.saturating_sub(1) {
                return Err(Error::Config(format!(
                    "num_irms {} exceeds num_decoders-1 = {}",
                    k,
                    self.num_decoders - 1
                )));
            }
        }
        if self.clip_length < 1 {
            return Err(Error::Config("clip_length must be >= 1".into()));
        }
        if self.num_classes < 1 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.n_det < 1 {
            return Err(Error::Config("n_det must be >= 1".into()));
        }
        if self.image_width % 8 != 0 || self.image_height % 8 != 0 || self.image_width == 0 {
            return Err(Error::Config(
                "image dimensions must be positive multiples of 8".into(),
            ));
        }
        Ok(())
    }

    /// Effective refinement-module count.
    pub fn irm_count(&self) -> usize {
        self.num_irms
            .unwrap_or_else(|| self.num_decoders.saturating_sub(1))
    }

    /// True when a refinement module sits before decoder layer `layer`
    /// (0-based). Modules are removed from the shallow end first, so the
    /// deepest `irm_count()` gaps keep theirs.
    pub fn irm_before_layer(&self, layer: usize) -> bool {
        layer >= 1 && layer >= self.num_decoders - self.irm_count()
    }

    /// Encoder token grid (width, height) after x8 downsampling.
    pub fn token_grid(&self) -> (usize, usize) {
        (self.image_width / 8, self.image_height / 8)
    }
}

/// Matching / loss weights, shared between the matcher and the losses.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    /// Relative weight of background rows in the matching-loss
    /// cross-entropy (the detector convention this follows).
    pub background_weight: f64,
    /// Switch from plain cross-entropy to focal-style weighting.
    pub focal: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 2.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            background_weight: 0.1,
            focal: false,
        }
    }
}

/// Training schedule.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    /// Clips per optimizer step.
    pub batch_clips: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Training videos to generate/use.
    pub num_videos: usize,
    /// Per-clip frame stride is drawn uniformly from `1..=max_stride`,
    /// exposing the model to varied temporal gaps.
    pub max_stride: usize,
    /// Learning rate is scaled by 0.1 for the final quarter of training.
    pub lr_drop: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 20,
            batch_clips: 8,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            grad_clip: 0.1,
            num_videos: 200,
            max_stride: 10,
            lr_drop: 0.1,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_clips == 0 || self.num_videos == 0 {
            return Err(Error::Config(
                "epochs, batch_clips and num_videos must be positive".into(),
            ));
        }
        if self.max_stride < 1 {
            return Err(Error::Config("max_stride must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch * 4 >= self.epochs * 3 {
            self.learning_rate * self.lr_drop
        } else {
            self.learning_rate
        }
    }
}

/// Synthetic scene parameters. The seed fully determines a generated item.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Speed range in pixels per frame.
    pub min_velocity: f64,
    pub max_velocity: f64,
    /// Per-frame probability of a direction change.
    pub direction_change_prob: f64,
    /// Object base extent range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Per-frame multiplicative size noise amplitude.
    pub size_jitter: f64,
    /// Per-frame additive color noise amplitude (0-255 scale).
    pub color_jitter: f64,
    /// Static occluding bars drawn over the scene.
    pub occluder_count: usize,
    pub occluder_size: f64,
    /// Frames per video.
    pub video_length: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            min_objects: 1,
            max_objects: 6,
            min_velocity: 1.0,
            max_velocity: 5.0,
            direction_change_prob: 0.1,
            min_size: 10.0,
            max_size: 18.0,
            size_jitter: 0.08,
            color_jitter: 12.0,
            occluder_count: 1,
            occluder_size: 14.0,
            video_length: 60,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects > self.max_objects || self.max_objects == 0 {
            return Err(Error::Config("object count range is degenerate".into()));
        }
        if self.min_velocity > self.max_velocity || self.min_velocity < 0.0 {
            return Err(Error::Config("velocity range is degenerate".into()));
        }
        if self.min_size > self.max_size || self.min_size <= 0.0 {
            return Err(Error::Config("size range is degenerate".into()));
        }
        if self.video_length == 0 {
            return Err(Error::Config("video_length must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.direction_change_prob) {
            return Err(Error::Config(
                "direction_change_prob must lie in [0,1]".into(),
            ));
        }
        Ok(())
    }
}

/// Whole config document.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Config,
    pub loss: LossWeights,
    pub train: TrainOptions,
    pub scene: SceneSpec,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.scene.validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
