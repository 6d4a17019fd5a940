//! Configuration shared by every stage. All keys have defaults; a JSON file
//! may override any subset of them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input geometry and the dimensions each synthetic encoder produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Dims {
    /// Side length of a (square) raw video frame in pixels.
    pub frame_size: usize,
    /// Side length of a square patch; `frame_size / patch` patches per side.
    pub patch: usize,
    pub patch_dim: usize,
    pub audio_len: usize,
    pub audio_dim: usize,
    pub vocab: usize,
    pub text_dim: usize,
    pub shared_dim: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims {
            frame_size: 12,
            patch: 2,
            patch_dim: 8,
            audio_len: 16,
            audio_dim: 20,
            vocab: 32,
            text_dim: 16,
            shared_dim: 32,
        }
    }
}

impl Dims {
    pub fn grid(&self) -> usize {
        self.frame_size / self.patch
    }

    /// Width of a video feature row: flattened patch grid plus text density.
    pub fn video_dim(&self) -> usize {
        self.grid() * self.grid() * self.patch_dim + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.frame_size % self.patch != 0 {
            return Err(Error::invalid("frame_size must be a positive multiple of patch"));
        }
        let positive = [
            self.patch_dim,
            self.audio_len,
            self.audio_dim,
            self.vocab,
            self.text_dim,
        ];
        if positive.contains(&0) || self.shared_dim < 2 {
            return Err(Error::invalid("encoder dims must be positive and shared_dim >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub beta_alpha: f64,
    pub tau: f64,
    pub sma_t0: u64,
    /// Width of the per-modality student adapter.
    pub student_dim: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            beta_alpha: 1.0,
            tau: 0.07,
            sma_t0: 10,
            student_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpatialConfig {
    pub text_rich_threshold: f64,
    pub max_boxes: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        SpatialConfig {
            text_rich_threshold: 0.3,
            max_boxes: 4,
            conv_kernel: 3,
            conv_stride: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub diff_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            diff_steps: 10,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the semantic/emotional branch loss.
    pub alpha: f64,
    /// Weight of the spatial/temporal branch loss.
    pub beta: f64,
    /// Weight of the distillation loss.
    pub gamma: f64,
    pub lambda_diff: f64,
    /// Decision threshold on the final score when no validation split exists.
    pub default_threshold: f64,
    /// Fraction of the training samples held back for threshold calibration.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 16,
            alpha: 0.1,
            beta: 3.0,
            gamma: 0.05,
            lambda_diff: 1.0,
            default_threshold: 0.1,
            val_fraction: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 || self.lambda_diff < 0.0 {
            return Err(Error::invalid("loss weights must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dims: Dims,
    pub distill: DistillConfig,
    pub spatial: SpatialConfig,
    pub tpe_bins: usize,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dims: Dims::default(),
            distill: DistillConfig::default(),
            spatial: SpatialConfig::default(),
            tpe_bins: 8,
            diffusion: DiffusionConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.train.validate()?;
        let d = &self.distill;
        if !(d.beta_alpha > 0.0) || !(d.tau > 0.0) || d.student_dim == 0 {
            return Err(Error::invalid("beta_alpha, tau and student_dim must be positive"));
        }
        if self.tpe_bins == 0 {
            return Err(Error::invalid("tpe_bins must be >= 1"));
        }
        let s = &self.spatial;
        if !(0.0..=1.0).contains(&s.text_rich_threshold) || s.conv_kernel == 0 || s.conv_stride == 0 {
            return Err(Error::invalid("invalid spatial configuration"));
        }
        let f = &self.diffusion;
        if f.diff_steps > 0 && !(0.0 < f.beta_start && f.beta_start <= f.beta_end && f.beta_end < 1.0) {
            return Err(Error::invalid("need 0 < beta_start <= beta_end < 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.dims.video_dim(), 6 * 6 * 8 + 1);
        assert_eq!((cfg.train.alpha, cfg.train.beta, cfg.train.gamma), (0.1, 3.0, 0.05));
    }

    #[test]
    fn partial_json_overrides() {
        let cfg: ModelConfig = serde_json::from_str(r#"{"tpe_bins": 4, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.tpe_bins, 4);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 16);
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = ModelConfig::default();
        cfg.train.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.diffusion.beta_end = 1.0;
        assert!(cfg.validate().is_err());
    }
}
