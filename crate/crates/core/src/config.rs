//! Run configuration: every hyperparameter of every stage, with defaults.
//!
//! The config hash is the SHA-256 of the compact JSON serialization (fields in
//! declaration order), so two runs with equal configs hash equally.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::numerics::AdamConfig;

/// Environment variable that overrides [`RunConfig::seed`].
pub const SEED_ENV: &str = "VERSA_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub samples_per_family: usize,
    /// Joint frames per sample; features have one frame fewer.
    pub joint_frames: usize,
    pub fps: u32,
    pub sample_rate: u32,
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples_per_family: 100,
            joint_frames: 65,
            fps: 20,
            sample_rate: 16_000,
            split: [0.8, 0.05, 0.15],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Temporal downsampling rate; a power of two.
    pub downsample: usize,
    pub hidden: usize,
    pub beta: f32,
    pub ema_decay: f32,
    pub reset_threshold: f32,
    pub window: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub grad_clip: f32,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            codebook_size: 512,
            code_dim: 512,
            downsample: 4,
            hidden: 512,
            beta: 0.25,
            ema_decay: 0.99,
            reset_threshold: 0.0625,
            window: 64,
            batch_size: 16,
            steps: 2000,
            adam: AdamConfig {
                lr: 2e-4,
                ..AdamConfig::default()
            },
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ff_width: usize,
    pub audio_dim: usize,
    pub text_dim: usize,
    pub mel_bins: usize,
    /// Token-rate window length used in training and generation.
    pub window_tokens: usize,
    pub overlap_tokens: usize,
    pub mask_ratio: [f32; 2],
    pub batch_size: usize,
    pub text_steps: usize,
    pub audio_steps: usize,
    pub adam: AdamConfig,
    pub grad_clip: f32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            heads: 6,
            width: 384,
            ff_width: 1536,
            audio_dim: 256,
            text_dim: 512,
            mel_bins: 80,
            window_tokens: 16,
            overlap_tokens: 2,
            mask_ratio: [0.2, 0.9],
            batch_size: 32,
            text_steps: 600,
            audio_steps: 600,
            adam: AdamConfig {
                lr: 3e-4,
                ..AdamConfig::default()
            },
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub feature_dim: usize,
    pub extractor_seed: u64,
    pub mmodality_samples: usize,
    pub mmodality_pairs: usize,
    pub temperature: f32,
    pub ridge: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            extractor_seed: 1234,
            mmodality_samples: 30,
            mmodality_pairs: 10,
            temperature: 1.0,
            ridge: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub vq: VqConfig,
    pub generator: GeneratorConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: DataConfig::default(),
            vq: VqConfig::default(),
            generator: GeneratorConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Apply `VERSA_SEED` if it is set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s.trim().parse().map_err(|_| {
                Error::InvalidInput(format!("{SEED_ENV}={s:?} is not an unsigned integer"))
            })?;
        }
        Ok(self)
    }

    pub fn hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        let vq = &self.vq;
        if !vq.downsample.is_power_of_two() || vq.downsample < 2 {
            return bad("vq.downsample must be a power of two ≥ 2");
        }
        if !vq.window.is_multiple_of(vq.downsample) {
            return bad("vq.window must be a multiple of vq.downsample");
        }
        if vq.beta <= 0.0 {
            return bad("vq.beta must be positive");
        }
        if !(0.0..=1.0).contains(&vq.ema_decay) {
            return bad("vq.ema_decay must lie in [0, 1]");
        }
        if vq.codebook_size == 0 || vq.code_dim == 0 || vq.hidden == 0 || vq.batch_size == 0 {
            return bad("vq sizes must be positive");
        }
        let g = &self.generator;
        if !g.width.is_multiple_of(g.heads) {
            return bad("generator.width must be divisible by generator.heads");
        }
        if g.layers == 0 || g.batch_size == 0 || g.window_tokens == 0 {
            return bad("generator sizes must be positive");
        }
        if g.overlap_tokens * 2 >= g.window_tokens {
            return bad("generator.overlap_tokens must be under half the window");
        }
        let [lo, hi] = g.mask_ratio;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return bad("generator.mask_ratio must satisfy 0 < lo ≤ hi < 1");
        }
        if self.data.joint_frames < 2 || self.data.fps == 0 {
            return bad("data.joint_frames must be ≥ 2 and data.fps positive");
        }
        if (self.data.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("data.split must sum to 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip_and_hash() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json_pretty()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 3, "vq": {"steps": 10}}"#).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.vq.steps, 10);
        assert_eq!(cfg.vq.codebook_size, 512);
    }

    #[test]
    fn unknown_fields_and_bad_values_rejected() {
        assert!(RunConfig::from_json(r#"{"sed": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"vq": {"downsample": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"generator": {"heads": 5}}"#).is_err());
    }
}
