use serde::{Deserialize, Serialize};

use super::PredictionRecord;
use crate::corpus::EncodedEssay;
use crate::error::Result;
use crate::exec::Exec;
use crate::model::{classification_logits, encoder_forward, EmbedSource, ForwardOptions, ModelParams};
use crate::tensor::{kernels, Tape};

/// How token outputs are pooled into an element prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Averaging {
    /// Mean of per-token softmax probabilities.
    #[default]
    Probability,
    /// Softmax of the mean token logits (ablation).
    Logit,
}

/// Eval-mode class logits for each non-PAD token.
pub fn token_logits(m: &ModelParams, encoded: &EncodedEssay) -> Result<Vec<[f64; 3]>> {
    let mut tape = Tape::new().with_exec(Exec::Sequential);
    let h = encoder_forward(&mut tape, m, encoded.tokens(), EmbedSource::Own, ForwardOptions::eval())?;
    let z = classification_logits(&mut tape, m, h, false)?;
    Ok(tape.value(z).chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Eval-mode class probabilities for each non-PAD token.
pub fn token_probabilities(m: &ModelParams, encoded: &EncodedEssay) -> Result<Vec<[f64; 3]>> {
    Ok(token_logits(m, encoded)?.iter().map(softmax3).collect())
}

fn softmax3(z: &[f64; 3]) -> [f64; 3] {
    let p = kernels::softmax_rows(z, 3);
    [p[0], p[1], p[2]]
}

fn renormalize(p: [f64; 3]) -> [f64; 3] {
    let s = p[0] + p[1] + p[2];
    [p[0] / s, p[1] / s, p[2] / s]
}

/// Pools token logits into one triple per element. The flag marks elements
/// with no surviving token, which get the uniform triple.
pub fn element_probabilities(logits: &[[f64; 3]], encoded: &EncodedEssay, averaging: Averaging) -> Vec<([f64; 3], bool)> {
    (0..encoded.num_elements())
        .map(|e| {
            let pos = encoded.element_positions(e);
            if pos.is_empty() {
                return ([1.0 / 3.0; 3], true);
            }
            let n = pos.len() as f64;
            let mut acc = [0.0; 3];
            for &t in &pos {
                let row = match averaging {
                    Averaging::Probability => softmax3(&logits[t]),
                    Averaging::Logit => logits[t],
                };
                for c in 0..3 {
                    acc[c] += row[c];
                }
            }
            let mean = acc.map(|v| v / n);
            let p = match averaging {
                Averaging::Probability => renormalize(mean),
                Averaging::Logit => softmax3(&mean),
            };
            (p, false)
        })
        .collect()
}

/// Element-level predictions for one encoded essay.
pub fn predict_discourse(m: &ModelParams, encoded: &EncodedEssay, averaging: Averaging) -> Result<Vec<PredictionRecord>> {
    let logits = token_logits(m, encoded)?;
    Ok(element_probabilities(&logits, encoded, averaging)
        .into_iter()
        .enumerate()
        .map(|(e, (probs, missing))| PredictionRecord {
            essay_id: encoded.essay_id.clone(),
            element_id: encoded.element_ids[e].clone(),
            probs,
            truth: encoded.element_ratings[e],
            missing_tokens: missing,
        })
        .collect())
}

/// Predictions for many essays, concatenated in input order.
pub fn predict_many(m: &ModelParams, essays: &[EncodedEssay], averaging: Averaging, exec: Exec) -> Result<Vec<PredictionRecord>> {
    let parts = exec.map(essays, |e| predict_discourse(m, e, averaging));
    let mut out = Vec::new();
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
