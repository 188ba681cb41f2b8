use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::regularize::{awp_perturbed_grads, sift_grad_estimate, sift_perturb, symmetric_kl};
use super::{adam_step, token_nll_sum, OptimizerState, SiftConfig, TrainConfig};
use crate::corpus::EncodedEssay;
use crate::error::Result;
use crate::exec::Exec;
use crate::model::{classification_logits, embed, encoder_layers, EmbedSource, ForwardOptions, ModelParams};
use crate::tensor::{mix_seed, Gradients, MemoryStats, PrecisionMode, Tape};

const DROPOUT_SALT: u64 = 0xd80f_0a7e;
const SIFT_SALT: u64 = 0x51f7;

/// How one gradient evaluation is run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOptions {
    pub train: bool,
    pub precision: PrecisionMode,
    pub checkpoint_segment: Option<usize>,
    pub sift: Option<SiftConfig>,
    pub exec: Exec,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            train: true,
            precision: PrecisionMode::Full64,
            checkpoint_segment: None,
            sift: None,
            exec: Exec::default(),
        }
    }
}

impl StepOptions {
    pub fn from_config(cfg: &TrainConfig, exec: Exec) -> Self {
        StepOptions {
            train: true,
            precision: cfg.precision,
            checkpoint_segment: cfg.checkpoint_activations.then_some(cfg.checkpoint_segment),
            sift: cfg.sift.enabled.then(|| cfg.sift.clone()),
            exec,
        }
    }
}

/// Gradient of one essay's summed token NLL.
#[derive(Debug, Clone)]
pub struct EssayGrad {
    pub nll_sum: f64,
    pub labelled: usize,
    pub grads: Gradients,
}

/// Gradient of the token-mean loss over some set of essays.
#[derive(Debug, Clone, Default)]
pub struct BatchGrad {
    /// Mean NLL per labelled token.
    pub loss: f64,
    pub labelled: usize,
    pub grads: Gradients,
    /// Largest per-essay activation footprint seen.
    pub memory: MemoryStats,
}

/// Forward and backward for one essay on its own tape seeded with `seed`.
/// `None` when the essay has no labelled token.
pub fn essay_gradients(m: &ModelParams, essay: &EncodedEssay, seed: u64, opts: &StepOptions) -> Result<Option<EssayGrad>> {
    let labels = essay.labels();
    if labels.iter().all(Option::is_none) {
        return Ok(None);
    }
    let fwd = ForwardOptions {
        train: opts.train,
        checkpoint_segment: opts.checkpoint_segment,
    };
    let mut tape = Tape::new()
        .with_seed(seed)
        .with_precision(opts.precision)
        .with_exec(Exec::Sequential);
    let h0 = embed(&mut tape, m, essay.tokens(), EmbedSource::Own)?;
    let hidden = encoder_layers(&mut tape, m, h0, fwd)?;
    let logits = classification_logits(&mut tape, m, hidden, opts.train)?;
    let Some((nll, labelled)) = token_nll_sum(&mut tape, logits, labels)? else {
        return Ok(None);
    };
    let nll_sum = tape.scalar(nll);
    let mut loss = nll;
    if let Some(sift) = opts.sift.as_ref().filter(|s| s.enabled && s.perturb_scale > 0.0) {
        let rows: Vec<bool> = labels.iter().map(Option::is_some).collect();
        let x = tape.tensor(h0);
        let clean = tape.tensor(logits);
        let estimate = sift_grad_estimate(m, &x, &clean, &rows, mix_seed(seed, SIFT_SALT))?;
        let p = sift_perturb(&x, &estimate, sift.perturb_scale, m.config.layer_norm_eps)?;
        let shift = tape.leaf(&p.input_shift);
        let hp = tape.add(h0, shift)?;
        let hp = encoder_layers(&mut tape, m, hp, fwd)?;
        let perturbed = classification_logits(&mut tape, m, hp, opts.train)?;
        let frozen = tape.stop_grad(logits);
        let kl = symmetric_kl(&mut tape, frozen, perturbed, &rows)?;
        let kl = tape.scale(kl, sift.consistency_weight);
        loss = tape.add(loss, kl)?;
    }
    let grads = tape.backward(loss)?;
    Ok(Some(EssayGrad {
        nll_sum,
        labelled,
        grads,
    }))
}

fn max_memory(a: MemoryStats, b: MemoryStats) -> MemoryStats {
    let pick = |x: crate::tensor::ActivationBytes, y: crate::tensor::ActivationBytes| {
        if y.accounted() > x.accounted() {
            y
        } else {
            x
        }
    };
    MemoryStats {
        stored: pick(a.stored, b.stored),
        peak: pick(a.peak, b.peak),
    }
}

/// Token-mean loss gradient of `essays`, where essay `i` uses dropout seed `seeds[i]`.
/// Essays run concurrently; their gradients are summed in input order.
pub fn micro_batch_gradients(m: &ModelParams, essays: &[EncodedEssay], seeds: &[u64], opts: &StepOptions) -> Result<BatchGrad> {
    assert_eq!(essays.len(), seeds.len(), "one seed per essay");
    let parts = opts
        .exec
        .map_range(essays.len(), |i| essay_gradients(m, &essays[i], seeds[i], opts));
    let mut out = BatchGrad::default();
    let mut nll = 0.0;
    for part in parts {
        let Some(e) = part? else { continue };
        nll += e.nll_sum;
        out.labelled += e.labelled;
        out.memory = max_memory(out.memory, e.grads.memory);
        out.grads.add_scaled(&e.grads, 1.0);
    }
    if out.labelled > 0 {
        let inv = 1.0 / out.labelled as f64;
        out.loss = nll * inv;
        let mut scaled = Gradients::default();
        scaled.add_scaled(&out.grads, inv);
        scaled.memory = out.memory;
        out.grads = scaled;
    }
    Ok(out)
}

/// One optimizer batch split into micro-batches of `micro_batch_size` essays.
/// Each micro-batch contributes its mean-loss gradient weighted by its share
/// of labelled tokens, so the result equals the big-batch token mean for any
/// split. Dropout seeds depend only on the essay's position in `batch`.
pub fn accumulated_gradients(
    m: &ModelParams,
    batch: &[EncodedEssay],
    micro_batch_size: usize,
    seed: u64,
    opts: &StepOptions,
) -> Result<BatchGrad> {
    let size = micro_batch_size.max(1);
    let seeds: Vec<u64> = (0..batch.len()).map(|i| mix_seed(seed, i as u64)).collect();
    let mut micro = Vec::new();
    for (chunk, s) in batch.chunks(size).zip(seeds.chunks(size)) {
        micro.push(micro_batch_gradients(m, chunk, s, opts)?);
    }
    let total: usize = micro.iter().map(|b| b.labelled).sum();
    let mut out = BatchGrad {
        labelled: total,
        ..BatchGrad::default()
    };
    if total == 0 {
        return Ok(out);
    }
    for mb in &micro {
        let w = mb.labelled as f64 / total as f64;
        out.loss += w * mb.loss;
        out.grads.add_scaled(&mb.grads, w);
        out.memory = max_memory(out.memory, mb.memory);
    }
    out.grads.memory = out.memory;
    Ok(out)
}

/// Full-batch gradients with the encoder split into checkpoint segments of
/// `segment_size` layers.
pub fn checkpointed_backward(
    m: &ModelParams,
    batch: &[EncodedEssay],
    segment_size: usize,
    seed: u64,
    opts: &StepOptions,
) -> Result<BatchGrad> {
    let opts = StepOptions {
        checkpoint_segment: Some(segment_size),
        ..opts.clone()
    };
    accumulated_gradients(m, batch, batch.len(), seed, &opts)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub awp: bool,
    pub peak_bytes: usize,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} epoch={} loss={:.6} lr={:.3e} awp={} peak_bytes={}",
            self.step, self.epoch, self.loss, self.lr, self.awp as u8, self.peak_bytes
        )
    }
}

fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub struct Trainer {
    pub model: ModelParams,
    pub config: TrainConfig,
    pub state: OptimizerState,
    pub step: usize,
    pub epoch: usize,
    pub log: Vec<StepLog>,
    pub exec: Exec,
    awp_threshold: Option<f64>,
}

impl Trainer {
    pub fn new(model: ModelParams, config: TrainConfig, exec: Exec) -> Result<Self> {
        config.validate()?;
        let state = OptimizerState::new(&model.store);
        let awp_threshold = config.awp.loss_threshold;
        Ok(Trainer {
            model,
            config,
            state,
            step: 0,
            epoch: 0,
            log: Vec::new(),
            exec,
            awp_threshold,
        })
    }

    pub fn awp_threshold(&self) -> Option<f64> {
        self.awp_threshold
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &[EncodedEssay]) -> Result<Option<StepLog>> {
        let opts = StepOptions::from_config(&self.config, self.exec);
        let seed = mix_seed(self.config.seed ^ DROPOUT_SALT, self.step as u64);
        let clean = accumulated_gradients(&self.model, batch, self.config.micro_batch_size, seed, &opts)?;
        if clean.labelled == 0 {
            return Ok(None);
        }
        let awp = &self.config.awp;
        let triggered = awp.enabled && self.awp_threshold.is_some_and(|t| clean.loss < t);
        let (grads, memory) = if triggered {
            let mbs = self.config.micro_batch_size;
            let adv = awp_perturbed_grads(&mut self.model, &clean.grads, awp, |m| {
                accumulated_gradients(m, batch, mbs, seed, &opts)
            })?;
            let memory = max_memory(clean.memory, adv.memory);
            (adv.grads, memory)
        } else {
            (clean.grads, clean.memory)
        };
        self.step += 1;
        let lr = self.config.lr_at(self.step);
        adam_step(&mut self.model.store, &grads, &mut self.state, &self.config, lr)?;
        let entry = StepLog {
            step: self.step,
            epoch: self.epoch,
            loss: clean.loss,
            lr,
            awp: triggered,
            peak_bytes: memory.peak.accounted(),
        };
        self.log.push(entry.clone());
        Ok(Some(entry))
    }

    /// One pass over `data` in a seeded shuffled order. Returns the mean step loss.
    pub fn train_epoch(&mut self, data: &[EncodedEssay], on_step: &mut dyn FnMut(&StepLog)) -> Result<f64> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, self.epoch as u64));
        order.shuffle(&mut rng);
        let per_step = self.config.micro_batch_size * self.config.accumulation_steps;
        let mut losses = Vec::new();
        for chunk in order.chunks(per_step) {
            let batch: Vec<EncodedEssay> = chunk.iter().map(|&i| data[i].clone()).collect();
            if let Some(entry) = self.train_step(&batch)? {
                on_step(&entry);
                losses.push(entry.loss);
            }
        }
        if self.config.awp.enabled && self.awp_threshold.is_none() {
            self.awp_threshold = median(&losses);
        }
        self.epoch += 1;
        Ok(if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        })
    }

    /// Runs the configured number of epochs; returns the mean loss of each.
    pub fn fit(&mut self, data: &[EncodedEssay], on_step: &mut dyn FnMut(&StepLog)) -> Result<Vec<f64>> {
        (0..self.config.epochs).map(|_| self.train_epoch(data, on_step)).collect()
    }

    /// Eval-mode token-mean loss over `data`; `None` when nothing is labelled.
    pub fn eval_loss(&self, data: &[EncodedEssay]) -> Result<Option<f64>> {
        eval_loss(&self.model, data, self.exec)
    }
}

/// Eval-mode token-mean loss of `m` over `data`.
pub fn eval_loss(m: &ModelParams, data: &[EncodedEssay], exec: Exec) -> Result<Option<f64>> {
    let parts = exec.map(data, |essay| -> Result<Option<(f64, usize)>> {
        let mut tape = Tape::new().with_exec(Exec::Sequential);
        let h = embed(&mut tape, m, essay.tokens(), EmbedSource::Own)?;
        let h = encoder_layers(&mut tape, m, h, ForwardOptions::eval())?;
        let logits = classification_logits(&mut tape, m, h, false)?;
        Ok(token_nll_sum(&mut tape, logits, essay.labels())?.map(|(v, n)| (tape.scalar(v), n)))
    });
    let (mut sum, mut count) = (0.0, 0);
    for p in parts {
        if let Some((s, n)) = p? {
            sum += s;
            count += n;
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, encode_corpus, synthetic_corpus, EncodeOptions, SynthConfig};
    use crate::model::ModelConfig;

    fn setup(n: usize, layers: usize, dropout: bool) -> (Vec<EncodedEssay>, ModelParams) {
        let corpus = synthetic_corpus(&SynthConfig {
            num_essays: n,
            ..SynthConfig::default()
        });
        let vocab = build_vocab(&corpus, 300, false).unwrap();
        let enc = encode_corpus(
            &corpus,
            &vocab,
            &EncodeOptions {
                max_len: 64,
                ..Default::default()
            },
            Exec::Sequential,
        )
        .unwrap();
        let (hd, cd) = if dropout { (0.1, vec![0.1, 0.3]) } else { (0.0, vec![0.0]) };
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            num_layers: layers,
            hidden_size: 8,
            num_heads: 2,
            ffn_size: 16,
            relative_window: 4,
            max_len: 64,
            hidden_dropout: hd,
            dropout_rates: cd,
            init_std: 0.2,
            ..ModelConfig::default()
        };
        (enc, ModelParams::new(cfg, 0).unwrap())
    }

    fn max_abs_diff(a: &Gradients, b: &Gradients) -> f64 {
        let mut worst = 0.0f64;
        for (k, ga) in a.params() {
            let gb = b.param(*k).unwrap();
            for (x, y) in ga.iter().zip(gb) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }

    #[test]
    fn accumulation_matches_big_batch() {
        let (data, m) = setup(8, 2, false);
        let opts = StepOptions::default();
        let big = accumulated_gradients(&m, &data, 8, 1, &opts).unwrap();
        for size in [1, 2, 3, 4] {
            let acc = accumulated_gradients(&m, &data, size, 1, &opts).unwrap();
            assert!(max_abs_diff(&big.grads, &acc.grads) < 1e-10, "micro size {size}");
            assert!((big.loss - acc.loss).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulation_with_dropout_uses_position_seeds() {
        let (data, m) = setup(4, 2, true);
        let opts = StepOptions::default();
        let big = accumulated_gradients(&m, &data, 4, 9, &opts).unwrap();
        let acc = accumulated_gradients(&m, &data, 1, 9, &opts).unwrap();
        assert!(max_abs_diff(&big.grads, &acc.grads) < 1e-10);
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let (data, m) = setup(6, 2, true);
        let par = accumulated_gradients(&m, &data, 2, 3, &StepOptions::default()).unwrap();
        let seq = accumulated_gradients(
            &m,
            &data,
            2,
            3,
            &StepOptions {
                exec: Exec::Sequential,
                ..StepOptions::default()
            },
        )
        .unwrap();
        assert_eq!(par.grads.param_bits(), seq.grads.param_bits());
    }

    #[test]
    fn checkpointing_is_bitwise_with_less_storage() {
        let (data, m) = setup(3, 4, true);
        let opts = StepOptions::default();
        let base = accumulated_gradients(&m, &data, 3, 5, &opts).unwrap();
        let mut last = base.memory.stored.accounted();
        for seg in [1, 2, 4] {
            let ck = checkpointed_backward(&m, &data, seg, 5, &opts).unwrap();
            assert_eq!(ck.grads.param_bits(), base.grads.param_bits(), "segment {seg}");
            let stored = ck.memory.stored.accounted();
            assert!(stored <= last, "segment {seg}");
            last = stored;
        }
        assert!(last < base.memory.stored.accounted());
    }

    #[test]
    fn half_precision_halves_stored_bytes() {
        let (data, m) = setup(2, 2, false);
        let full = accumulated_gradients(&m, &data, 2, 0, &StepOptions::default()).unwrap();
        let half = accumulated_gradients(
            &m,
            &data,
            2,
            0,
            &StepOptions {
                precision: PrecisionMode::Half16Activations,
                ..StepOptions::default()
            },
        )
        .unwrap();
        assert_eq!(2 * half.memory.stored.accounted(), full.memory.stored.accounted());
        assert!(max_abs_diff(&full.grads, &half.grads) < 1e-2);
    }

    #[test]
    fn training_is_deterministic_and_logs_each_step() {
        let (data, m) = setup(6, 1, true);
        let cfg = TrainConfig {
            epochs: 3,
            micro_batch_size: 2,
            accumulation_steps: 2,
            learning_rate: 1e-2,
            awp: super::super::AwpConfig {
                enabled: true,
                ..Default::default()
            },
            ..TrainConfig::default()
        };
        let run = || {
            let mut t = Trainer::new(m.clone(), cfg.clone(), Exec::Parallel).unwrap();
            let mut lines = Vec::new();
            t.fit(&data, &mut |l| lines.push(l.to_string())).unwrap();
            (lines, t.model.store.value_bits(), t.awp_threshold())
        };
        let (a, wa, th) = run();
        let (b, wb, _) = run();
        assert_eq!(a, b);
        assert_eq!(wa, wb);
        assert_eq!(a.len(), 6);
        assert!(a[0].starts_with("step=1 epoch=0 loss="));
        assert!(th.is_some());
        assert!(a.iter().skip(2).any(|l| l.contains("awp=1")));
        assert!(a.iter().take(2).all(|l| l.contains("awp=0")));
    }

    #[test]
    fn zero_scale_sift_changes_nothing() {
        let (data, m) = setup(3, 1, false);
        let plain = accumulated_gradients(&m, &data, 3, 0, &StepOptions::default()).unwrap();
        let sift = StepOptions {
            sift: Some(SiftConfig {
                enabled: true,
                perturb_scale: 0.0,
                consistency_weight: 1.0,
            }),
            ..StepOptions::default()
        };
        let zero = accumulated_gradients(&m, &data, 3, 0, &sift).unwrap();
        assert_eq!(plain.grads.param_bits(), zero.grads.param_bits());
        let on = StepOptions {
            sift: Some(SiftConfig {
                enabled: true,
                perturb_scale: 0.5,
                consistency_weight: 1.0,
            }),
            ..StepOptions::default()
        };
        let active = accumulated_gradients(&m, &data, 3, 0, &on).unwrap();
        assert_eq!(active.loss, plain.loss);
        assert!(max_abs_diff(&plain.grads, &active.grads) > 0.0);
    }

    #[test]
    fn eval_loss_ignores_dropout() {
        let (data, m) = setup(3, 1, true);
        let a = eval_loss(&m, &data, Exec::Parallel).unwrap().unwrap();
        let b = eval_loss(&m, &data, Exec::Sequential).unwrap().unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
