use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::{DEFAULT_CHUNKS, DEFAULT_NEGATIVES};
use crate::error::{Error, Result};

/// Hybrid-training settings. Every field can be set from a TOML file;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the contrastive term; the KL term gets `1 - alpha`.
    pub alpha: f64,
    pub lr: f64,
    /// Multiplicative learning-rate decay per step.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Negatives per positive (N).
    pub negatives: usize,
    /// Chunks per embedding for shuffling (K).
    pub chunks: usize,
    pub sr_augment_enabled: bool,
    pub sr_augment_prob: f64,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub segment_frames: usize,
    pub flow_hidden: usize,
    pub flow_layers: usize,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            lr: 2e-4,
            lr_decay: 0.999875,
            batch_size: 16,
            max_steps: 5000,
            seed: 0,
            negatives: DEFAULT_NEGATIVES,
            chunks: DEFAULT_CHUNKS,
            sr_augment_enabled: true,
            sr_augment_prob: 0.5,
            checkpoint_every: 1000,
            log_every: 50,
            segment_frames: 32,
            flow_hidden: 64,
            flow_layers: 4,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    /// Full-size setting: batch 256, 80k steps.
    pub fn full_scale() -> Self {
        TrainConfig {
            batch_size: 256,
            max_steps: 80_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_steps", self.max_steps),
            ("checkpoint_every", self.checkpoint_every),
            ("log_every", self.log_every),
            ("segment_frames", self.segment_frames),
            ("flow_hidden", self.flow_hidden),
            ("flow_layers", self.flow_layers),
            ("negatives", self.negatives),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.chunks < 2 {
            return bad(format!("chunks must be at least 2, got {}", self.chunks));
        }
        if !(0.0..=1.0).contains(&self.sr_augment_prob) {
            return bad(format!(
                "sr_augment_prob must lie in [0, 1], got {}",
                self.sr_augment_prob
            ));
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * self.lr_decay.powi(step as i32)
    }
}
