use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{predict_discourse, Averaging, PredictionRecord};
use crate::corpus::{EncodedEssay, Rating, Vocab};
use crate::error::{Error, Result};
use crate::model::{attention_maps, ModelParams};
use crate::tensor::Tensor;

/// How one layer's attention matrices become a per-token score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Column mean over heads and query rows: attention a token receives.
    #[default]
    Received,
    /// Row maximum averaged over heads: how sharply a token attends.
    /// (Row means of a softmax are always `1/n`, so they carry no signal.)
    Emitted,
}

/// Min-max normalized salience from one layer's per-head `n×n` attention maps.
/// A constant score vector maps to all ones.
pub fn salience(heads: &[Tensor], agg: Aggregation) -> Result<Vec<f64>> {
    let Some(first) = heads.first() else {
        return Err(Error::contract("salience needs at least one attention head"));
    };
    let (n, _) = first.dims2()?;
    let mut raw = vec![0.0; n];
    for h in heads {
        match agg {
            Aggregation::Received => {
                for r in 0..n {
                    for (c, v) in h.row(r).iter().enumerate() {
                        raw[c] += v;
                    }
                }
            }
            Aggregation::Emitted => {
                for (r, slot) in raw.iter_mut().enumerate() {
                    *slot += h.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                }
            }
        }
    }
    let denom = match agg {
        Aggregation::Received => (heads.len() * n) as f64,
        Aggregation::Emitted => heads.len() as f64,
    };
    raw.iter_mut().for_each(|v| *v /= denom);
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(if hi > lo {
        raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![1.0; n]
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapDocument {
    pub essay_id: String,
    pub layer: usize,
    pub tokens: Vec<String>,
    pub salience: Vec<f64>,
    pub token_elements: Vec<Option<String>>,
    pub elements: Vec<PredictionRecord>,
}

fn argmax(p: &[f64; 3]) -> usize {
    (0..3).fold(0, |b, i| if p[i] > p[b] { i } else { b })
}

fn rating_name(i: usize) -> String {
    Rating::from_index(i).map(|r| format!("{r:?}")).unwrap_or_default()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

impl HeatmapDocument {
    fn predicted(&self, element_id: &str) -> Option<&PredictionRecord> {
        self.elements.iter().find(|r| r.element_id == element_id)
    }

    pub fn to_html(&self) -> String {
        let mut html = String::new();
        let _ = write!(
            html,
            "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{}</title>\n\
             <style>body{{font-family:sans-serif;max-width:60em;line-height:1.8}}\
             span.t{{padding:0 2px;border-radius:3px}}</style></head><body>\n\
             <h1>{}</h1>\n<p>layer {} attention salience</p>\n<p>",
            escape(&self.essay_id),
            escape(&self.essay_id),
            self.layer
        );
        for (i, tok) in self.tokens.iter().enumerate() {
            let s = self.salience[i];
            let title = match self.token_elements[i].as_deref().and_then(|e| self.predicted(e).map(|r| (e, r))) {
                Some((e, r)) => format!("{e}: {} ({:.3})", rating_name(argmax(&r.probs)), r.probs[argmax(&r.probs)]),
                None => "outside elements".to_string(),
            };
            let _ = write!(
                html,
                "<span class=\"t\" style=\"background:rgba(220,40,40,{s:.3})\" title=\"{}\">{}</span> ",
                escape(&title),
                escape(tok)
            );
        }
        html.push_str("</p>\n<table border=\"1\"><tr><th>element</th><th>rating</th><th>p</th></tr>\n");
        for r in &self.elements {
            let k = argmax(&r.probs);
            let _ = writeln!(
                html,
                "<tr><td>{}</td><td>{}</td><td>{:.3}</td></tr>",
                escape(&r.element_id),
                rating_name(k),
                r.probs[k]
            );
        }
        html.push_str("</table>\n</body></html>\n");
        html
    }

    /// `token,salience,element_id,predicted_rating`, one row per token.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["token", "salience", "element_id", "predicted_rating"])?;
        for (i, tok) in self.tokens.iter().enumerate() {
            let el = self.token_elements[i].clone().unwrap_or_default();
            let rating = self
                .predicted(&el)
                .map(|r| rating_name(argmax(&r.probs)))
                .unwrap_or_default();
            w.write_record([tok.clone(), self.salience[i].to_string(), el, rating])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub fn build_heatmap(
    m: &ModelParams,
    encoded: &EncodedEssay,
    vocab: &Vocab,
    layer: usize,
    agg: Aggregation,
) -> Result<HeatmapDocument> {
    if layer >= m.config.num_layers {
        return Err(Error::contract(format!(
            "layer {layer} out of range for {} layers",
            m.config.num_layers
        )));
    }
    let maps = attention_maps(m, encoded.tokens())?;
    let sal = salience(&maps[layer], agg)?;
    let tokens = encoded.tokens().iter().map(|&t| vocab.token(t).to_string()).collect();
    let token_elements = encoded.token_element_index[..encoded.length]
        .iter()
        .map(|e| e.map(|i| encoded.element_ids[i].clone()))
        .collect();
    Ok(HeatmapDocument {
        essay_id: encoded.essay_id.clone(),
        layer,
        tokens,
        salience: sal,
        token_elements,
        elements: predict_discourse(m, encoded, Averaging::Probability)?,
    })
}

/// Writes `path` (HTML) and a CSV sidecar next to it; returns the sidecar path.
pub fn export_heatmap(m: &ModelParams, encoded: &EncodedEssay, vocab: &Vocab, layer: usize, path: impl AsRef<Path>) -> Result<PathBuf> {
    let doc = build_heatmap(m, encoded, vocab, layer, Aggregation::Received)?;
    let path = path.as_ref();
    std::fs::write(path, doc.to_html())?;
    let sidecar = path.with_extension("csv");
    std::fs::write(&sidecar, doc.to_csv()?)?;
    Ok(sidecar)
}
