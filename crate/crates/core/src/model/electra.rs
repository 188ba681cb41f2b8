//! Generator/discriminator pretraining with replaced-token detection.
//!
//! The discriminator reads its word embedding as
//! `stop_grad(generator table) + delta`, so the detection loss never reaches
//! the generator's table while the generator's MLM loss never reaches the delta.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{emd_mlm_logits, encoder_forward, rtd_logits, EmbedSource, ForwardOptions};
use super::{ModelConfig, ModelParams};
use crate::corpus::EncodedEssay;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::{kernels, mix_seed, Gradients, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct RtdOptions {
    pub mask_rate: f64,
    pub mlm_weight: f64,
    pub rtd_weight: f64,
    pub seed: u64,
    /// Dropout on and gradients computed; off for held-out evaluation.
    pub train: bool,
    pub exec: Exec,
}

impl Default for RtdOptions {
    fn default() -> Self {
        RtdOptions {
            mask_rate: 0.15,
            mlm_weight: 1.0,
            rtd_weight: 1.0,
            seed: 0,
            train: true,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RtdBatchStats {
    pub tokens: usize,
    pub masked: usize,
    pub replaced: usize,
    /// Tokens whose replaced/original status the discriminator got right.
    pub correct: usize,
}

impl RtdBatchStats {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.tokens.max(1) as f64
    }

    /// Accuracy of always answering the more frequent class.
    pub fn majority_rate(&self) -> f64 {
        let r = self.replaced as f64 / self.tokens.max(1) as f64;
        r.max(1.0 - r)
    }

    fn add(&mut self, o: RtdBatchStats) {
        self.tokens += o.tokens;
        self.masked += o.masked;
        self.replaced += o.replaced;
        self.correct += o.correct;
    }
}

#[derive(Debug, Clone)]
pub struct RtdStep {
    /// Mean MLM loss over masked positions; `None` when nothing was masked.
    pub mlm_loss: Option<f64>,
    /// Mean detection loss over tokens; `None` when nothing was masked.
    pub rtd_loss: Option<f64>,
    /// Generator (group of `generator.store`) and discriminator gradients.
    pub grads: Gradients,
    pub stats: RtdBatchStats,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub inputs: Vec<Vec<usize>>,
    pub masked: Vec<Vec<bool>>,
}

/// Replaces each non-PAD token by `mask_id` with probability `mask_rate`.
pub fn mask_tokens(batch: &[EncodedEssay], mask_id: usize, mask_rate: f64, seed: u64) -> Result<MaskedBatch> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::contract(format!("mask_rate {mask_rate} outside (0, 1)")));
    }
    let mut inputs = Vec::with_capacity(batch.len());
    let mut masked = Vec::with_capacity(batch.len());
    for (i, e) in batch.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
        let flags: Vec<bool> = e.tokens().iter().map(|_| rng.random::<f64>() < mask_rate).collect();
        inputs.push(
            e.tokens()
                .iter()
                .zip(&flags)
                .map(|(&t, &m)| if m { mask_id } else { t })
                .collect(),
        );
        masked.push(flags);
    }
    Ok(MaskedBatch { inputs, masked })
}

/// Generator (group 0) and discriminator (group 1); the discriminator's own
/// word table starts at zero because it is read as a delta.
pub fn pretraining_pair(config: &ModelConfig) -> Result<(ModelParams, ModelParams)> {
    let generator = ModelParams::new(config.generator(), 0)?;
    let mut discriminator = ModelParams::new(config.clone(), 1)?;
    discriminator.zero_where("embed.word");
    Ok((generator, discriminator))
}

/// Folds the shared table into the discriminator: `E := E_G + delta`.
pub fn materialize_shared_embedding(generator: &ModelParams, discriminator: &ModelParams) -> ModelParams {
    let mut out = discriminator.clone();
    let shared = generator.store.get(generator.ids.embed).data().to_vec();
    for (d, s) in out.store.get_mut(out.ids.embed).data_mut().iter_mut().zip(shared) {
        *d += s;
    }
    out
}

pub fn rtd_pretrain_step(
    batch: &[EncodedEssay],
    generator: &ModelParams,
    discriminator: &ModelParams,
    mask_id: usize,
    opts: &RtdOptions,
) -> Result<RtdStep> {
    if generator.config.num_layers > discriminator.config.num_layers {
        return Err(Error::contract("generator is deeper than the discriminator"));
    }
    let masked = mask_tokens(batch, mask_id, opts.mask_rate, opts.seed)?;
    let total_masked: usize = masked.masked.iter().flatten().filter(|m| **m).count();
    let total_tokens: usize = batch.iter().map(|e| e.length).sum();
    if total_masked == 0 {
        return Ok(RtdStep {
            mlm_loss: None,
            rtd_loss: None,
            grads: Gradients::default(),
            stats: RtdBatchStats::default(),
        });
    }

    let fwd = ForwardOptions {
        train: opts.train,
        checkpoint_segment: None,
    };
    let per_essay = opts.exec.map_range(batch.len(), |i| -> Result<(f64, f64, Gradients, RtdBatchStats)> {
        let essay = &batch[i];
        let original = essay.tokens();
        let input = &masked.inputs[i];
        let flags = &masked.masked[i];
        let mut tape = Tape::new().with_seed(mix_seed(opts.seed ^ 0x5eed, i as u64)).with_exec(Exec::Sequential);

        let gh = encoder_forward(&mut tape, generator, input, EmbedSource::Own, fwd)?;
        let logits = emd_mlm_logits(&mut tape, generator, gh)?;
        let targets: Vec<Option<usize>> = original
            .iter()
            .zip(flags)
            .map(|(&t, &m)| m.then_some(t))
            .collect();
        let mlm = tape.cross_entropy_sum(logits, &targets)?;

        let vocab = generator.config.vocab_size;
        let probs = kernels::softmax_rows(tape.value(logits), vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed ^ 0xa11ce, i as u64));
        let mut corrupted = original.to_vec();
        for (t, &m) in flags.iter().enumerate() {
            if m {
                let dist = WeightedIndex::new(&probs[t * vocab..(t + 1) * vocab])
                    .map_err(|e| Error::contract(format!("generator distribution: {e}")))?;
                corrupted[t] = dist.sample(&mut rng);
            }
        }
        let labels: Vec<f64> = corrupted
            .iter()
            .zip(original)
            .map(|(c, o)| if c != o { 1.0 } else { 0.0 })
            .collect();

        let dh = encoder_forward(&mut tape, discriminator, &corrupted, EmbedSource::SharedDelta(generator), fwd)?;
        let dl = rtd_logits(&mut tape, discriminator, dh)?;
        let rtd = tape.bce_with_logits_sum(dl, &labels)?;

        let stats = RtdBatchStats {
            tokens: original.len(),
            masked: flags.iter().filter(|m| **m).count(),
            replaced: labels.iter().filter(|&&y| y == 1.0).count(),
            correct: tape
                .value(dl)
                .iter()
                .zip(&labels)
                .filter(|(z, y)| (**z > 0.0) == (**y == 1.0))
                .count(),
        };
        let (mlm_v, rtd_v) = (tape.scalar(mlm), tape.scalar(rtd));
        let grads = if opts.train {
            let mlm_term = tape.scale(mlm, opts.mlm_weight / total_masked as f64);
            let rtd_term = tape.scale(rtd, opts.rtd_weight / total_tokens as f64);
            let loss = match (opts.mlm_weight == 0.0, opts.rtd_weight == 0.0) {
                (true, _) => rtd_term,
                (_, true) => mlm_term,
                _ => tape.add(mlm_term, rtd_term)?,
            };
            tape.backward(loss)?
        } else {
            Gradients::default()
        };
        Ok((mlm_v, rtd_v, grads, stats))
    });

    let mut grads = Gradients::default();
    let mut stats = RtdBatchStats::default();
    let (mut mlm_sum, mut rtd_sum) = (0.0, 0.0);
    for r in per_essay {
        let (m, d, g, s) = r?;
        mlm_sum += m;
        rtd_sum += d;
        grads.add_scaled(&g, 1.0);
        stats.add(s);
    }
    Ok(RtdStep {
        mlm_loss: Some(mlm_sum / total_masked as f64),
        rtd_loss: Some(rtd_sum / total_tokens as f64),
        grads,
        stats,
    })
}
