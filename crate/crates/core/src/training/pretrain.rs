use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, OptimizerState, TrainConfig};
use crate::corpus::EncodedEssay;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{
    materialize_shared_embedding, pretraining_pair, rtd_pretrain_step, ModelConfig, ModelParams, RtdBatchStats, RtdOptions,
};
use crate::tensor::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PretrainMode {
    /// Masked-token prediction only; the generator is built at full depth
    /// and becomes the exported model.
    Mlm,
    /// Generator plus replaced-token-detection discriminator with shared embeddings.
    #[default]
    Rtd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub mode: PretrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_rate: f64,
    pub rtd_weight: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mode: PretrainMode::Rtd,
            epochs: 10,
            batch_size: 4,
            learning_rate: 2e-3,
            mask_rate: 0.15,
            rtd_weight: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub mlm_loss: f64,
    pub rtd_loss: f64,
    pub stats: RtdBatchStats,
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub generator: ModelParams,
    pub discriminator: ModelParams,
    pub mode: PretrainMode,
}

impl Pretrained {
    /// Encoder weights to carry into fine-tuning.
    pub fn export(&self) -> ModelParams {
        match self.mode {
            PretrainMode::Mlm => self.generator.clone(),
            PretrainMode::Rtd => materialize_shared_embedding(&self.generator, &self.discriminator),
        }
    }

    /// Detection statistics on `data` with dropout off and nothing updated.
    pub fn evaluate(&self, data: &[EncodedEssay], mask_id: usize, mask_rate: f64, seed: u64, exec: Exec) -> Result<RtdBatchStats> {
        let step = rtd_pretrain_step(
            data,
            &self.generator,
            &self.discriminator,
            mask_id,
            &RtdOptions {
                mask_rate,
                seed,
                train: false,
                exec,
                ..RtdOptions::default()
            },
        )?;
        Ok(step.stats)
    }
}

/// Shuffled mini-batch Adam over `data`, one optimizer per network.
pub fn pretrain(
    data: &[EncodedEssay],
    model: &ModelConfig,
    cfg: &PretrainConfig,
    mask_id: usize,
    exec: Exec,
    on_epoch: &mut dyn FnMut(&PretrainEpoch),
) -> Result<Pretrained> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::contract("pretraining needs data and a positive batch size"));
    }
    let model = ModelConfig {
        seed: cfg.seed,
        ..model.clone()
    };
    let (mut generator, mut discriminator) = match cfg.mode {
        PretrainMode::Rtd => pretraining_pair(&model)?,
        PretrainMode::Mlm => {
            let (_, d) = pretraining_pair(&model)?;
            (ModelParams::new(model.clone(), 0)?, d)
        }
    };
    let rtd_weight = match cfg.mode {
        PretrainMode::Rtd => cfg.rtd_weight,
        PretrainMode::Mlm => 0.0,
    };
    let adam = TrainConfig::default();
    let mut g_state = OptimizerState::new(&generator.store);
    let mut d_state = OptimizerState::new(&discriminator.store);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64)));
        let mut report = PretrainEpoch {
            epoch,
            mlm_loss: 0.0,
            rtd_loss: 0.0,
            stats: RtdBatchStats::default(),
        };
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<EncodedEssay> = chunk.iter().map(|&i| data[i].clone()).collect();
            let out = rtd_pretrain_step(
                &batch,
                &generator,
                &discriminator,
                mask_id,
                &RtdOptions {
                    mask_rate: cfg.mask_rate,
                    mlm_weight: 1.0,
                    rtd_weight,
                    seed: mix_seed(cfg.seed ^ 0x9e7, step),
                    train: true,
                    exec,
                },
            )?;
            step += 1;
            let (Some(mlm), Some(rtd)) = (out.mlm_loss, out.rtd_loss) else {
                continue;
            };
            adam_step(&mut generator.store, &out.grads, &mut g_state, &adam, cfg.learning_rate)?;
            if rtd_weight != 0.0 {
                adam_step(&mut discriminator.store, &out.grads, &mut d_state, &adam, cfg.learning_rate)?;
            }
            report.mlm_loss += mlm;
            report.rtd_loss += rtd;
            report.stats.tokens += out.stats.tokens;
            report.stats.masked += out.stats.masked;
            report.stats.replaced += out.stats.replaced;
            report.stats.correct += out.stats.correct;
            batches += 1;
        }
        if batches > 0 {
            report.mlm_loss /= batches as f64;
            report.rtd_loss /= batches as f64;
        }
        on_epoch(&report);
    }
    Ok(Pretrained {
        generator,
        discriminator,
        mode: cfg.mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, encode_corpus, synthetic_corpus, EncodeOptions, SynthConfig};

    #[test]
    fn pretraining_is_deterministic_and_moves_weights() {
        let corpus = synthetic_corpus(&SynthConfig {
            num_essays: 4,
            ..SynthConfig::default()
        });
        let vocab = build_vocab(&corpus, 300, true).unwrap();
        let enc = encode_corpus(
            &corpus,
            &vocab,
            &EncodeOptions {
                max_len: 40,
                ..Default::default()
            },
            Exec::Sequential,
        )
        .unwrap();
        let model = ModelConfig {
            vocab_size: vocab.len(),
            hidden_size: 8,
            num_heads: 2,
            ffn_size: 16,
            max_len: 40,
            ..ModelConfig::default()
        };
        let cfg = PretrainConfig {
            epochs: 2,
            mask_rate: 0.3,
            ..PretrainConfig::default()
        };
        let mask = vocab.mask_id().unwrap();
        let mut epochs = 0;
        let a = pretrain(&enc, &model, &cfg, mask, Exec::Parallel, &mut |_| epochs += 1).unwrap();
        let b = pretrain(&enc, &model, &cfg, mask, Exec::Sequential, &mut |_| {}).unwrap();
        assert_eq!(epochs, 2);
        assert_eq!(a.export().store.value_bits(), b.export().store.value_bits());
        let (g0, _) = pretraining_pair(&ModelConfig { seed: 0, ..model }).unwrap();
        assert_ne!(g0.store.value_bits(), a.generator.store.value_bits());
    }
}
