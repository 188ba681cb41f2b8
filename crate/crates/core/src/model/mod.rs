//! Relative-position encoder, enhanced mask decoder, task heads and the
//! generator/discriminator pretraining pair.

mod electra;
mod layers;

pub use electra::{
    materialize_shared_embedding, mask_tokens, pretraining_pair, rtd_pretrain_step, MaskedBatch, RtdBatchStats, RtdOptions, RtdStep,
};
pub use layers::{
    attention_maps, classification_logits, disentangled_scores, embed, emd_mlm_logits, encoder_forward,
    encoder_layers, relative_bucket, rtd_logits, EmbedSource, ForwardOptions,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    /// Relative distances are clipped to `[-k, k-1]`; the table has `2k` rows.
    pub relative_window: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub max_len: usize,
    /// Multi-sample dropout rates of the classification head.
    pub dropout_rates: Vec<f64>,
    pub hidden_dropout: f64,
    /// Overrides the default score scale `1/sqrt(3·d_h)`.
    pub attention_scale: Option<f64>,
    pub layer_norm_eps: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            hidden_size: 32,
            num_heads: 2,
            ffn_size: 64,
            relative_window: 8,
            vocab_size: 128,
            num_classes: 3,
            max_len: 512,
            dropout_rates: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            hidden_dropout: 0.1,
            attention_scale: None,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn score_scale(&self) -> f64 {
        self.attention_scale
            .unwrap_or_else(|| 1.0 / (3.0 * self.head_dim() as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if self.relative_window == 0 {
            return fail("relative_window must be at least 1".into());
        }
        if self.num_classes != 3 {
            return fail(format!("num_classes must be 3, got {}", self.num_classes));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.ffn_size == 0 {
            return fail("vocab_size, max_len and ffn_size must be positive".into());
        }
        if self.dropout_rates.is_empty() {
            return fail("dropout_rates must not be empty".into());
        }
        if let Some(r) = self
            .dropout_rates
            .iter()
            .chain([&self.hidden_dropout])
            .find(|r| !(0.0..1.0).contains(*r))
        {
            return fail(format!("dropout rate {r} outside [0, 1)"));
        }
        Ok(())
    }

    /// Same architecture at half depth (at least one layer).
    pub fn generator(&self) -> ModelConfig {
        ModelConfig {
            num_layers: (self.num_layers / 2).max(1),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerIds {
    pub w_qc: ParamId,
    pub w_kc: ParamId,
    pub w_vc: ParamId,
    pub w_qr: ParamId,
    pub w_kr: ParamId,
    pub rel: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w_ff1: ParamId,
    pub b_ff1: ParamId,
    pub w_ff2: ParamId,
    pub b_ff2: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmdIds {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamIds {
    pub embed: ParamId,
    pub abs_pos: ParamId,
    pub layers: Vec<LayerIds>,
    pub emd: EmdIds,
    pub mlm_w: ParamId,
    pub mlm_b: ParamId,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
    pub rtd_w: ParamId,
    pub rtd_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub ids: ParamIds,
}

impl ModelParams {
    /// Randomly initialized parameters. `group` tags the store so two models
    /// can share one tape without their gradients colliding.
    pub fn new(config: ModelConfig, group: u32) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (u64::from(group) << 32));
        let (d, f, v, std) = (config.hidden_size, config.ffn_size, config.vocab_size, config.init_std);
        let mut store = ParamStore::new(group);
        let mut normal = |store: &mut ParamStore, name: String, shape: &[usize]| {
            store.add(name, Tensor::normal(shape, std, &mut rng))
        };
        let embed = normal(&mut store, "embed.word".into(), &[v, d]);
        let abs_pos = normal(&mut store, "embed.abs_pos".into(), &[config.max_len, d]);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            let w_qc = normal(&mut store, p("attn.w_qc"), &[d, d]);
            let w_kc = normal(&mut store, p("attn.w_kc"), &[d, d]);
            let w_vc = normal(&mut store, p("attn.w_vc"), &[d, d]);
            let w_qr = normal(&mut store, p("attn.w_qr"), &[d, d]);
            let w_kr = normal(&mut store, p("attn.w_kr"), &[d, d]);
            let rel = normal(&mut store, p("attn.rel"), &[2 * config.relative_window, d]);
            let w_o = normal(&mut store, p("attn.w_o"), &[d, d]);
            let b_o = store.add(p("attn.b_o"), Tensor::zeros(&[d]));
            let ln1_g = store.add(p("ln1.g"), Tensor::filled(&[d], 1.0));
            let ln1_b = store.add(p("ln1.b"), Tensor::zeros(&[d]));
            let w_ff1 = normal(&mut store, p("ffn.w1"), &[d, f]);
            let b_ff1 = store.add(p("ffn.b1"), Tensor::zeros(&[f]));
            let w_ff2 = normal(&mut store, p("ffn.w2"), &[f, d]);
            let b_ff2 = store.add(p("ffn.b2"), Tensor::zeros(&[d]));
            let ln2_g = store.add(p("ln2.g"), Tensor::filled(&[d], 1.0));
            let ln2_b = store.add(p("ln2.b"), Tensor::zeros(&[d]));
            layers.push(LayerIds {
                w_qc,
                w_kc,
                w_vc,
                w_qr,
                w_kr,
                rel,
                w_o,
                b_o,
                ln1_g,
                ln1_b,
                w_ff1,
                b_ff1,
                w_ff2,
                b_ff2,
                ln2_g,
                ln2_b,
            });
        }
        let emd = EmdIds {
            w_q: normal(&mut store, "emd.w_q".into(), &[d, d]),
            w_k: normal(&mut store, "emd.w_k".into(), &[d, d]),
            w_v: normal(&mut store, "emd.w_v".into(), &[d, d]),
            w_o: normal(&mut store, "emd.w_o".into(), &[d, d]),
            b_o: store.add("emd.b_o", Tensor::zeros(&[d])),
            ln_g: store.add("emd.ln.g", Tensor::filled(&[d], 1.0)),
            ln_b: store.add("emd.ln.b", Tensor::zeros(&[d])),
        };
        let mlm_w = normal(&mut store, "head.mlm.w".into(), &[d, v]);
        let mlm_b = store.add("head.mlm.b", Tensor::zeros(&[v]));
        let cls_w = normal(&mut store, "head.cls.w".into(), &[d, config.num_classes]);
        let cls_b = store.add("head.cls.b", Tensor::zeros(&[config.num_classes]));
        let rtd_w = normal(&mut store, "head.rtd.w".into(), &[d, 1]);
        let rtd_b = store.add("head.rtd.b", Tensor::zeros(&[1]));
        Ok(ModelParams {
            config,
            store,
            ids: ParamIds {
                embed,
                abs_pos,
                layers,
                emd,
                mlm_w,
                mlm_b,
                cls_w,
                cls_b,
                rtd_w,
                rtd_b,
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Sets every parameter whose name contains `pattern` to zero.
    pub fn zero_where(&mut self, pattern: &str) {
        let ids: Vec<ParamId> = self
            .store
            .iter()
            .filter(|(_, name, _)| name.contains(pattern))
            .map(|(id, _, _)| id)
            .collect();
        for id in ids {
            self.store.get_mut(id).data_mut().fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            num_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig {
            dropout_rates: vec![],
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parameter_layout() {
        let cfg = ModelConfig {
            relative_window: 4,
            ..ModelConfig::default()
        };
        let m = ModelParams::new(cfg.clone(), 0).unwrap();
        assert_eq!(m.store.get(m.ids.layers[1].rel).shape(), &[8, 32]);
        assert_eq!(m.store.get(m.ids.embed).shape(), &[cfg.vocab_size, 32]);
        assert_eq!(m.store.get(m.ids.cls_w).shape(), &[32, 3]);
        assert_eq!(cfg.generator().num_layers, 1);
        let again = ModelParams::new(cfg, 0).unwrap();
        assert_eq!(m.store.value_bits(), again.store.value_bits());
    }
}
