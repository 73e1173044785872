use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::retrieval::RetrievalConfig;

use super::optim::{AdamWConfig, LrSchedule};

/// Every knob of the captioning pipeline. Read from `key = value` text
/// (TOML); missing keys take the desk-scale defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub p: usize,
    pub d_model: usize,
    pub d_llm: usize,
    /// Fusion stack depth and width.
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Width of the incoming visual features.
    pub enc_dim: usize,
    pub dec_blocks: usize,
    pub dec_heads: usize,
    pub dec_ffn_dim: usize,
    pub seed: u64,
    pub lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_steps: u64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub beam_size: usize,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small configuration that trains in seconds on one core.
    pub fn desk() -> Self {
        Self {
            k: 10,
            p: 8,
            d_model: 16,
            d_llm: 64,
            n_blocks: 2,
            n_heads: 2,
            ffn_dim: 32,
            enc_dim: 16,
            dec_blocks: 2,
            dec_heads: 4,
            dec_ffn_dim: 128,
            seed: 0,
            lr: 5e-2,
            warmup_start_lr: 1e-4,
            warmup_steps: 20,
            min_lr: 0.0,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            batch_size: 24,
            max_steps: 400,
            beam_size: 5,
            max_len: 64,
        }
    }

    /// Full-size dimensions and optimizer settings of the reference system.
    /// Only used for arithmetic (parameter counts); the frozen stand-ins are
    /// never allocated at this size by the test suite.
    pub fn full_scale() -> Self {
        Self {
            d_model: 768,
            d_llm: 5120,
            n_heads: 12,
            ffn_dim: 3072,
            enc_dim: 768,
            dec_heads: 40,
            dec_ffn_dim: 13824,
            lr: 1e-4,
            warmup_start_lr: 1e-6,
            warmup_steps: 5000,
            ..Self::desk()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("plain struct serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion().validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.d_llm == 0 || self.dec_heads == 0 || !self.d_llm.is_multiple_of(self.dec_heads) {
            return bad("d_llm must be a positive multiple of dec_heads");
        }
        if self.beam_size == 0 {
            return bad("beam_size must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if [self.lr, self.warmup_start_lr, self.min_lr, self.weight_decay, self.eps]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return bad("rates must be finite and nonnegative");
        }
        Ok(())
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            d_model: self.d_model,
            p: self.p,
            n_blocks: self.n_blocks,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            enc_dim: self.enc_dim,
            seed: self.seed,
        }
    }

    pub fn retrieval(&self) -> RetrievalConfig {
        RetrievalConfig { k: self.k }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak_lr: self.lr,
            warmup_start_lr: self.warmup_start_lr,
            warmup_steps: self.warmup_steps,
            min_lr: self.min_lr,
            total_steps: self.max_steps,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}
