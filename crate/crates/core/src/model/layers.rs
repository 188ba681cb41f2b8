use std::ops::Range;
use std::rc::Rc;

use super::{LayerIds, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{SegmentFn, Tape, Tensor, Var};

/// Row of the relative table for query position `i` and key position `j`:
/// `clamp(i - j, -k, k-1) + k`.
pub fn relative_bucket(i: usize, j: usize, k: usize) -> usize {
    let k = k as i64;
    let delta = (i as i64 - j as i64).clamp(-k, k - 1);
    (delta + k) as usize
}

/// Where the word embedding comes from.
#[derive(Debug, Clone, Copy)]
pub enum EmbedSource<'m> {
    /// The model's own table.
    Own,
    /// `stop_grad(generator table) + own table`, the own table acting as a delta.
    SharedDelta(&'m ModelParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    pub train: bool,
    /// Layers per checkpoint segment; `None` stores every activation.
    pub checkpoint_segment: Option<usize>,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions::default()
    }

    pub fn train() -> Self {
        ForwardOptions {
            train: true,
            checkpoint_segment: None,
        }
    }
}

pub fn embed<'a>(tape: &mut Tape<'a>, m: &'a ModelParams, tokens: &[usize], src: EmbedSource<'a>) -> Result<Var> {
    if tokens.len() > m.config.max_len {
        return Err(Error::contract(format!(
            "sequence of {} tokens exceeds max_len {}",
            tokens.len(),
            m.config.max_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= m.config.vocab_size) {
        return Err(Error::contract(format!(
            "token id {bad} out of range for vocabulary of {}",
            m.config.vocab_size
        )));
    }
    let own = tape.param(&m.store, m.ids.embed);
    let own_rows = tape.embedding(own, tokens)?;
    match src {
        EmbedSource::Own => Ok(own_rows),
        EmbedSource::SharedDelta(generator) => {
            let shared = tape.param(&generator.store, generator.ids.embed);
            let shared_rows = tape.embedding(shared, tokens)?;
            let frozen = tape.stop_grad(shared_rows);
            tape.add(frozen, own_rows)
        }
    }
}

fn linear<'a>(tape: &mut Tape<'a>, m: &'a ModelParams, x: Var, w: usize, b: usize) -> Result<Var> {
    let wv = tape.param(&m.store, w);
    let bv = tape.param(&m.store, b);
    let y = tape.matmul(x, wv)?;
    tape.add_row(y, bv)
}

fn project<'a>(tape: &mut Tape<'a>, m: &'a ModelParams, x: Var, w: usize) -> Result<Var> {
    let wv = tape.param(&m.store, w);
    tape.matmul(x, wv)
}

fn layer_norm<'a>(tape: &mut Tape<'a>, m: &'a ModelParams, x: Var, g: usize, b: usize) -> Result<Var> {
    let gv = tape.param(&m.store, g);
    let bv = tape.param(&m.store, b);
    tape.layer_norm(x, Some((gv, bv)), m.config.layer_norm_eps)
}

struct AttentionOut {
    out: Var,
    probs: Vec<Var>,
    scores: Vec<Var>,
}

fn disentangled_attention<'a>(tape: &mut Tape<'a>, m: &'a ModelParams, ids: &LayerIds, h: Var) -> Result<AttentionOut> {
    let cfg = &m.config;
    let n = tape.shape(h)[0];
    let (dh, k2) = (cfg.head_dim(), 2 * cfg.relative_window);
    let qc = project(tape, m, h, ids.w_qc)?;
    let kc = project(tape, m, h, ids.w_kc)?;
    let v = project(tape, m, h, ids.w_vc)?;
    let rel = tape.param(&m.store, ids.rel);
    let kr = project(tape, m, rel, ids.w_kr)?;
    let qr = project(tape, m, rel, ids.w_qr)?;

    let k = cfg.relative_window;
    let mut c2p_index = Vec::with_capacity(n * n);
    let mut p2c_index = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            c2p_index.push(i * k2 + relative_bucket(j, i, k));
            p2c_index.push(j * k2 + relative_bucket(i, j, k));
        }
    }
    let c2p_index: Rc<[usize]> = c2p_index.into();
    let p2c_index: Rc<[usize]> = p2c_index.into();

    let mut probs = Vec::with_capacity(cfg.num_heads);
    let mut scores = Vec::with_capacity(cfg.num_heads);
    let mut contexts = Vec::with_capacity(cfg.num_heads);
    for head in 0..cfg.num_heads {
        let off = head * dh;
        let (qh, kh, vh) = if cfg.num_heads == 1 {
            (qc, kc, v)
        } else {
            (
                tape.slice_cols(qc, off, dh)?,
                tape.slice_cols(kc, off, dh)?,
                tape.slice_cols(v, off, dh)?,
            )
        };
        let (krh, qrh) = if cfg.num_heads == 1 {
            (kr, qr)
        } else {
            (tape.slice_cols(kr, off, dh)?, tape.slice_cols(qr, off, dh)?)
        };
        let c2c = tape.matmul_nt(qh, kh)?;
        let c2p_all = tape.matmul_nt(qh, krh)?;
        let c2p = tape.gather(c2p_all, Rc::clone(&c2p_index), &[n, n])?;
        let p2c_all = tape.matmul_nt(kh, qrh)?;
        let p2c = tape.gather(p2c_all, Rc::clone(&p2c_index), &[n, n])?;
        let s = tape.add(c2c, c2p)?;
        let s = tape.add(s, p2c)?;
        let scaled = tape.scale(s, cfg.score_scale());
        let p = tape.softmax_rows(scaled);
        contexts.push(tape.matmul(p, vh)?);
        probs.push(p);
        scores.push(s);
    }
    let ctx = if contexts.len() == 1 {
        contexts[0]
    } else {
        tape.concat_cols(&contexts)?
    };
    let out = linear(tape, m, ctx, ids.w_o, ids.b_o)?;
    Ok(AttentionOut { out, probs, scores })
}

fn layer_forward<'a>(tape: &mut Tape<'a>, m: &'a ModelParams, l: usize, h: Var, train: bool) -> Result<(Var, Vec<Var>)> {
    let ids = &m.ids.layers[l];
    let rate = if train { m.config.hidden_dropout } else { 0.0 };
    let attn = disentangled_attention(tape, m, ids, h)?;
    let a = tape.dropout(attn.out, rate)?;
    let x = tape.add(h, a)?;
    let x = layer_norm(tape, m, x, ids.ln1_g, ids.ln1_b)?;
    let f = linear(tape, m, x, ids.w_ff1, ids.b_ff1)?;
    let f = tape.gelu(f);
    let f = linear(tape, m, f, ids.w_ff2, ids.b_ff2)?;
    let f = tape.dropout(f, rate)?;
    let y = tape.add(x, f)?;
    let y = layer_norm(tape, m, y, ids.ln2_g, ids.ln2_b)?;
    Ok((y, attn.probs))
}

fn run_layers<'a>(tape: &mut Tape<'a>, m: &'a ModelParams, range: Range<usize>, h: Var, train: bool) -> Result<Var> {
    let mut h = h;
    for l in range {
        h = layer_forward(tape, m, l, h, train)?.0;
    }
    Ok(h)
}

/// Runs the encoder stack on embedded input `h0`, optionally in checkpoint segments.
pub fn encoder_layers<'a>(tape: &mut Tape<'a>, m: &'a ModelParams, h0: Var, opts: ForwardOptions) -> Result<Var> {
    let layers = m.config.num_layers;
    match opts.checkpoint_segment {
        None => run_layers(tape, m, 0..layers, h0, opts.train),
        Some(0) => Err(Error::contract("checkpoint segment size must be at least 1")),
        Some(size) => {
            let mut h = h0;
            let mut start = 0;
            while start < layers {
                let range = start..(start + size).min(layers);
                let train = opts.train;
                let body: SegmentFn<'a> =
                    Rc::new(move |tp: &mut Tape<'a>, ins: &[Var]| run_layers(tp, m, range.clone(), ins[0], train));
                h = tape.checkpoint(&[h], body)?;
                start += size;
            }
            Ok(h)
        }
    }
}

/// Embedding lookup followed by the encoder stack. No absolute positions enter here.
pub fn encoder_forward<'a>(
    tape: &mut Tape<'a>,
    m: &'a ModelParams,
    tokens: &[usize],
    src: EmbedSource<'a>,
    opts: ForwardOptions,
) -> Result<Var> {
    let h0 = embed(tape, m, tokens, src)?;
    encoder_layers(tape, m, h0, opts)
}

/// Mean over the configured dropout rates of the shared linear head.
pub fn classification_logits<'a>(tape: &mut Tape<'a>, m: &'a ModelParams, hidden: Var, train: bool) -> Result<Var> {
    let rates = &m.config.dropout_rates;
    if !train || rates.iter().all(|&r| r == 0.0) {
        return linear(tape, m, hidden, m.ids.cls_w, m.ids.cls_b);
    }
    let mut total: Option<Var> = None;
    for &r in rates {
        let d = tape.dropout(hidden, r)?;
        let y = linear(tape, m, d, m.ids.cls_w, m.ids.cls_b)?;
        total = Some(match total {
            None => y,
            Some(t) => tape.add(t, y)?,
        });
    }
    let total = total.expect("rates are non-empty");
    Ok(tape.scale(total, 1.0 / rates.len() as f64))
}

/// Enhanced mask decoder: one attention layer whose queries carry absolute
/// positions, followed by the vocabulary projection.
pub fn emd_mlm_logits<'a>(tape: &mut Tape<'a>, m: &'a ModelParams, hidden: Var) -> Result<Var> {
    let cfg = &m.config;
    let e = &m.ids.emd;
    let n = tape.shape(hidden)[0];
    let table = tape.param(&m.store, m.ids.abs_pos);
    let pos = tape.slice_rows(table, 0, n)?;
    let enriched = tape.add(hidden, pos)?;
    let q = project(tape, m, enriched, e.w_q)?;
    let k = project(tape, m, hidden, e.w_k)?;
    let v = project(tape, m, hidden, e.w_v)?;
    let dh = cfg.head_dim();
    let mut contexts = Vec::with_capacity(cfg.num_heads);
    for head in 0..cfg.num_heads {
        let off = head * dh;
        let qh = tape.slice_cols(q, off, dh)?;
        let kh = tape.slice_cols(k, off, dh)?;
        let vh = tape.slice_cols(v, off, dh)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
        let p = tape.softmax_rows(s);
        contexts.push(tape.matmul(p, vh)?);
    }
    let ctx = tape.concat_cols(&contexts)?;
    let o = linear(tape, m, ctx, e.w_o, e.b_o)?;
    let x = tape.add(enriched, o)?;
    let x = layer_norm(tape, m, x, e.ln_g, e.ln_b)?;
    linear(tape, m, x, m.ids.mlm_w, m.ids.mlm_b)
}

/// Per-token replaced-token logits, shape `n×1`.
pub fn rtd_logits<'a>(tape: &mut Tape<'a>, m: &'a ModelParams, hidden: Var) -> Result<Var> {
    linear(tape, m, hidden, m.ids.rtd_w, m.ids.rtd_b)
}

/// Attention probabilities of every layer and head, in eval mode.
pub fn attention_maps(m: &ModelParams, tokens: &[usize]) -> Result<Vec<Vec<Tensor>>> {
    let mut tape = Tape::new();
    let mut h = embed(&mut tape, m, tokens, EmbedSource::Own)?;
    let mut maps = Vec::with_capacity(m.config.num_layers);
    for l in 0..m.config.num_layers {
        let (y, probs) = layer_forward(&mut tape, m, l, h, false)?;
        maps.push(probs.iter().map(|&p| tape.tensor(p)).collect());
        h = y;
    }
    Ok(maps)
}

/// Unscaled per-head scores `c2c + c2p + p2c` of layer `layer` for hidden states `hidden`.
pub fn disentangled_scores(m: &ModelParams, layer: usize, hidden: &Tensor) -> Result<Vec<Tensor>> {
    if layer >= m.config.num_layers {
        return Err(Error::contract(format!(
            "layer {layer} out of range for {} layers",
            m.config.num_layers
        )));
    }
    let mut tape = Tape::new();
    let h = tape.leaf(hidden);
    let attn = disentangled_attention(&mut tape, m, &m.ids.layers[layer], h)?;
    Ok(attn.scores.iter().map(|&s| tape.tensor(s)).collect())
}
