//! Token-classification fine-tuning: Adam, accumulation, checkpointing,
//! reduced-precision activation storage, AWP and SiFT.

mod adam;
mod loss;
mod memory;
mod pretrain;
mod regularize;
mod trainer;

pub use adam::{adam_step, OptimizerState};
pub use regularize::{
    awp_offsets, awp_perturbed_grads, sift_grad_estimate, sift_perturb, symmetric_kl, HasParams, SiftPerturbation,
};
pub use loss::{token_cross_entropy, token_nll_sum};
pub use pretrain::{pretrain, PretrainConfig, PretrainEpoch, PretrainMode, Pretrained};
pub use memory::{estimate_memory, Accounting, MemoryEstimate};
pub use trainer::{
    accumulated_gradients, checkpointed_backward, essay_gradients, eval_loss, micro_batch_gradients, BatchGrad,
    EssayGrad, StepLog, StepOptions, Trainer,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::PrecisionMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AwpConfig {
    pub enabled: bool,
    /// Perturb only when the clean loss is below this; `None` uses the first-epoch median.
    pub loss_threshold: Option<f64>,
    pub perturb_scale: f64,
    pub eps: f64,
}

impl Default for AwpConfig {
    fn default() -> Self {
        AwpConfig {
            enabled: false,
            loss_threshold: None,
            perturb_scale: 1e-3,
            eps: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SiftConfig {
    pub enabled: bool,
    pub perturb_scale: f64,
    pub consistency_weight: f64,
}

impl Default for SiftConfig {
    fn default() -> Self {
        SiftConfig {
            enabled: false,
            perturb_scale: 1e-2,
            consistency_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub micro_batch_size: usize,
    pub accumulation_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: PrecisionMode,
    pub checkpoint_activations: bool,
    /// Layers per checkpoint segment when checkpointing is on.
    pub checkpoint_segment: usize,
    /// Linear warmup over this many optimizer steps; 0 keeps the rate constant.
    pub warmup_steps: usize,
    pub awp: AwpConfig,
    pub sift: SiftConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            micro_batch_size: 4,
            accumulation_steps: 1,
            epochs: 10,
            seed: 0,
            precision: PrecisionMode::Full64,
            checkpoint_activations: false,
            checkpoint_segment: 1,
            warmup_steps: 0,
            awp: AwpConfig::default(),
            sift: SiftConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m));
        if self.accumulation_steps == 0 {
            return fail("accumulation_steps must be at least 1");
        }
        if self.micro_batch_size == 0 {
            return fail("micro_batch_size must be at least 1");
        }
        if self.checkpoint_activations && self.checkpoint_segment == 0 {
            return fail("checkpoint_segment must be at least 1");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return fail("learning_rate must be positive");
        }
        if self.awp.enabled && (self.awp.perturb_scale.is_nan() || self.awp.perturb_scale <= 0.0) {
            return fail("awp.perturb_scale must be positive when AWP is enabled");
        }
        if self.sift.enabled && (self.sift.perturb_scale.is_nan() || self.sift.perturb_scale <= 0.0) {
            return fail("sift.perturb_scale must be positive when SiFT is enabled");
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Learning rate for optimizer step `step` (1-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        }
    }
}
