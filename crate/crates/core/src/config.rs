//! Run configuration: every module default in one versioned TOML document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::band_select::DEFAULT_THRESHOLD_NM;
use crate::detect::DEFAULT_NMS_IOU;
use crate::error::{Error, Result};
use crate::hsi_io::SceneSpec;
use crate::scl::{DEFAULT_STAGES, DEFAULT_TOPK_RATIO};
use crate::sda::{DEFAULT_DECODER_BLOCKS, DEFAULT_PCA_COMPONENTS};
use crate::sgg::DEFAULT_LAMBDA;

pub const CONFIG_VERSION: u32 = 1;
/// Encoder depth; level `i` has stride `2^i`.
pub const PYRAMID_LEVELS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub band_threshold_nm: f64,
    pub bands_per_side: usize,
    /// Output channels of the five stride-2 encoder layers, per stream.
    pub encoder_widths: Vec<usize>,
    /// Convolutions per encoder level; all but the first keep the stride.
    pub encoder_depth: usize,
    pub scl_stages: usize,
    pub topk_ratio: f64,
    pub heads: usize,
    pub pca_components: usize,
    pub extractor_width: usize,
    pub decoder_blocks: usize,
    pub sgg_lambda: f64,
    /// Gate the fused vi/ir features of every SCL level.
    pub sgg_after_scl: bool,
    /// Gate the spectral extractor output before cross-attention.
    pub sgg_on_spectral: bool,
    pub head_hidden: usize,
    pub nms_iou: f64,
    /// Detections below this confidence are left out of reports.
    pub score_threshold: f64,
    pub learning_rate: f64,
    pub steps: usize,
    /// Size of the fixed training pool.
    pub train_scenes: usize,
    /// Scenes per gradient step; the pool is reshuffled every epoch.
    pub batch_size: usize,
    pub eval_scenes: usize,
    /// Training and evaluation scenes hold `1..=max_objects` objects.
    pub max_objects: usize,
    pub scene: SceneSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            band_threshold_nm: DEFAULT_THRESHOLD_NM,
            bands_per_side: 6,
            encoder_widths: vec![8, 8, 16, 16, 16],
            encoder_depth: 2,
            scl_stages: DEFAULT_STAGES,
            topk_ratio: DEFAULT_TOPK_RATIO,
            heads: 1,
            pca_components: DEFAULT_PCA_COMPONENTS,
            extractor_width: 8,
            decoder_blocks: DEFAULT_DECODER_BLOCKS,
            sgg_lambda: DEFAULT_LAMBDA,
            sgg_after_scl: true,
            sgg_on_spectral: true,
            head_hidden: 32,
            nms_iou: DEFAULT_NMS_IOU,
            score_threshold: 0.25,
            learning_rate: 0.01,
            steps: 200,
            train_scenes: 128,
            batch_size: 128,
            eval_scenes: 20,
            max_objects: 3,
            scene: SceneSpec::default(),
        }
    }
}

fn bad(field: &str, message: impl Into<String>) -> Error {
    Error::Config { field: field.into(), message: message.into() }
}

impl RunConfig {
    pub fn num_classes(&self) -> usize {
        self.scene.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(bad("version", format!("expected {CONFIG_VERSION}, got {}", self.version)));
        }
        self.scene.validate().map_err(|e| bad("scene", e.to_string()))?;
        if self.seed > i64::MAX as u64 {
            return Err(bad("seed", "must fit a signed 64-bit integer"));
        }
        let lo = self.scene.wavelength_min_nm;
        let hi = self.scene.wavelength_max_nm;
        if !(self.band_threshold_nm >= lo && self.band_threshold_nm <= hi) {
            return Err(bad("band_threshold_nm", format!("{} outside [{lo}, {hi}]", self.band_threshold_nm)));
        }
        if self.bands_per_side == 0 {
            return Err(bad("bands_per_side", "must be >= 1"));
        }
        if self.encoder_widths.len() != PYRAMID_LEVELS || self.encoder_widths.contains(&0) {
            return Err(bad("encoder_widths", format!("need {PYRAMID_LEVELS} positive widths")));
        }
        if self.encoder_depth == 0 {
            return Err(bad("encoder_depth", "must be >= 1"));
        }
        if self.scl_stages == 0 {
            return Err(bad("scl_stages", "must be >= 1"));
        }
        if !(self.topk_ratio > 0.0 && self.topk_ratio <= 1.0) {
            return Err(bad("topk_ratio", format!("{} outside (0, 1]", self.topk_ratio)));
        }
        if self.heads == 0 || self.encoder_widths[2..].iter().any(|w| w % self.heads != 0) {
            return Err(bad("heads", format!("{} heads must divide the s3..s5 widths", self.heads)));
        }
        if self.pca_components == 0 || self.pca_components > self.scene.bands {
            return Err(bad("pca_components", format!("must lie in 1..={}", self.scene.bands)));
        }
        if self.extractor_width == 0 {
            return Err(bad("extractor_width", "must be >= 1"));
        }
        if !(self.sgg_lambda > 0.0 && self.sgg_lambda.is_finite()) {
            return Err(bad("sgg_lambda", "must be > 0"));
        }
        if self.head_hidden == 0 {
            return Err(bad("head_hidden", "must be >= 1"));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(bad("nms_iou", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(bad("score_threshold", "must lie in [0, 1]"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(bad("learning_rate", "must be finite and >= 0"));
        }
        if self.train_scenes == 0 {
            return Err(bad("train_scenes", "must be >= 1"));
        }
        if self.batch_size == 0 || self.batch_size > self.train_scenes {
            return Err(bad("batch_size", format!("must lie in 1..={}", self.train_scenes)));
        }
        if self.max_objects == 0 {
            return Err(bad("max_objects", "must be >= 1"));
        }
        let stride = 1 << PYRAMID_LEVELS;
        if self.scene.height % stride != 0 || self.scene.width % stride != 0 {
            return Err(bad("scene", format!("height and width must be multiples of {stride}")));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| bad("config", e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| bad("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = format!("bogus = 1\n{}", RunConfig::default().to_toml().unwrap());
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn field_named_in_error() {
        let cfg = RunConfig { topk_ratio: 1.5, ..RunConfig::default() };
        let err = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "topk_ratio"));
    }

    #[test]
    fn wrong_version() {
        let cfg = RunConfig { version: 2, ..RunConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config { ref field, .. }) if field == "version"));
    }
}
