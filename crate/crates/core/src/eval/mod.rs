//! Log-loss, element-level prediction from token probabilities, attention
//! heatmaps and checkpoint files.

mod checkpoint;
mod heatmap;
mod predict;

pub use checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, load_checkpoint_expecting, save_checkpoint};
pub use heatmap::{build_heatmap, export_heatmap, salience, Aggregation, HeatmapDocument};
pub use predict::{element_probabilities, predict_discourse, predict_many, token_logits, token_probabilities, Averaging};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Essay;
use crate::error::{Error, Result};

pub const CLIP: f64 = 1e-15;

/// Predicted rating distribution for one discourse element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub essay_id: String,
    pub element_id: String,
    pub probs: [f64; 3],
    /// Index of the true rating, when known.
    pub truth: Option<usize>,
    /// Set when the element had no surviving tokens and `probs` is uniform.
    #[serde(default)]
    pub missing_tokens: bool,
}

/// Mean negative log-probability of the true class, with probabilities
/// clipped to `[1e-15, 1 - 1e-15]`.
pub fn log_loss(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::contract("log_loss of an empty record list"));
    }
    let mut total = 0.0;
    for r in records {
        let y = r
            .truth
            .ok_or_else(|| Error::contract(format!("record {} has no truth label", r.element_id)))?;
        if y >= 3 {
            return Err(Error::contract(format!("record {} has truth index {y}", r.element_id)));
        }
        total -= r.probs[y].clamp(CLIP, 1.0 - CLIP).ln();
    }
    Ok(total / records.len() as f64)
}

/// One-vs-rest ROC AUC averaged over the classes that have both positives
/// and negatives. Ties count half. `None` when no class qualifies.
pub fn macro_auc(records: &[PredictionRecord]) -> Result<Option<f64>> {
    let mut labelled = Vec::with_capacity(records.len());
    for r in records {
        match r.truth {
            Some(y) if y < 3 => labelled.push((r.probs, y)),
            _ => return Err(Error::contract(format!("record {} has no usable truth label", r.element_id))),
        }
    }
    let mut aucs = Vec::new();
    for c in 0..3 {
        let mut scored: Vec<(f64, bool)> = labelled.iter().map(|(p, y)| (p[c], *y == c)).collect();
        let pos = scored.iter().filter(|s| s.1).count();
        let neg = scored.len() - pos;
        if pos == 0 || neg == 0 {
            continue;
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Mann-Whitney U with average ranks over tied scores.
        let mut rank_sum = 0.0;
        let mut i = 0;
        while i < scored.len() {
            let mut j = i;
            while j < scored.len() && scored[j].0 == scored[i].0 {
                j += 1;
            }
            let avg_rank = (i + j + 1) as f64 / 2.0;
            rank_sum += avg_rank * scored[i..j].iter().filter(|s| s.1).count() as f64;
            i = j;
        }
        let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
        aucs.push(u / (pos * neg) as f64);
    }
    Ok((!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64))
}

/// Log-loss of bare probability rows against class indices.
pub fn log_loss_rows(probs: &[[f64; 3]], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let records: Vec<PredictionRecord> = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| PredictionRecord {
            essay_id: String::new(),
            element_id: String::new(),
            probs: *p,
            truth: Some(y),
            missing_tokens: false,
        })
        .collect();
    log_loss(&records)
}

/// Writes `element_id,p0,p1,p2` rows. Floats use the shortest round-trip form.
pub fn write_predictions(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["element_id", "p0", "p1", "p2"])?;
    for r in records {
        w.write_record([
            r.element_id.clone(),
            r.probs[0].to_string(),
            r.probs[1].to_string(),
            r.probs[2].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let mut rd = csv::Reader::from_path(path)?;
    let headers = rd.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["element_id", "p0", "p1", "p2"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "expected header element_id,p0,p1,p2".into(),
        });
    }
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row?;
        let parse = |c: usize| -> Result<f64> {
            row.get(c).and_then(|s| s.trim().parse().ok()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: format!("column {c} is not a number"),
            })
        };
        out.push(PredictionRecord {
            essay_id: String::new(),
            element_id: row.get(0).unwrap_or_default().to_string(),
            probs: [parse(1)?, parse(2)?, parse(3)?],
            truth: None,
            missing_tokens: false,
        });
    }
    Ok(out)
}

/// Fills `truth` (and `essay_id`) from a gold corpus by element id. Every
/// prediction must have a rated gold element.
pub fn attach_truth(records: &mut [PredictionRecord], gold: &[Essay]) -> Result<()> {
    let mut index = std::collections::HashMap::new();
    for e in gold {
        for el in &e.elements {
            index.insert(el.element_id.as_str(), (e.essay_id.as_str(), el.rating));
        }
    }
    for r in records.iter_mut() {
        let (essay, rating) = index
            .get(r.element_id.as_str())
            .ok_or_else(|| Error::contract(format!("element {} not found in gold corpus", r.element_id)))?;
        let rating = rating.ok_or_else(|| Error::contract(format!("gold element {} has no rating", r.element_id)))?;
        r.truth = Some(rating.index());
        r.essay_id = essay.to_string();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(p: [f64; 3], y: usize) -> PredictionRecord {
        PredictionRecord {
            essay_id: "e".into(),
            element_id: "e_0".into(),
            probs: p,
            truth: Some(y),
            missing_tokens: false,
        }
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn golden_values() {
        let u = 1.0 / 3.0;
        let uniform: Vec<_> = (0..3).map(|y| rec([u, u, u], y)).collect();
        assert!((log_loss(&uniform).unwrap() - 3f64.ln()).abs() < 1e-12);
        let perfect = log_loss(&[rec([1.0, 0.0, 0.0], 0), rec([0.0, 0.0, 1.0], 2)]).unwrap();
        assert!(perfect.abs() < 1e-12);
        let half = log_loss(&[rec([0.5, 0.25, 0.25], 0)]).unwrap();
        assert!((half - 0.6931471805599453).abs() < 1e-12);
    }

    #[test]
    fn auc_matches_pair_counting() {
        let rows = [
            rec([0.7, 0.2, 0.1], 0),
            rec([0.4, 0.4, 0.2], 1),
            rec([0.4, 0.1, 0.5], 0),
            rec([0.1, 0.3, 0.6], 2),
            rec([0.3, 0.3, 0.4], 1),
        ];
        let mut expect = 0.0;
        for c in 0..3 {
            let (mut wins, mut pairs) = (0.0, 0.0);
            for a in rows.iter().filter(|r| r.truth == Some(c)) {
                for b in rows.iter().filter(|r| r.truth != Some(c)) {
                    pairs += 1.0;
                    wins += match a.probs[c].partial_cmp(&b.probs[c]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
            expect += wins / pairs / 3.0;
        }
        assert!((macro_auc(&rows).unwrap().unwrap() - expect).abs() < 1e-12);
        assert_eq!(macro_auc(&[rec([1.0, 0.0, 0.0], 0)]).unwrap(), None);
    }

    #[test]
    fn clipping_keeps_loss_finite() {
        let l = log_loss(&[rec([0.0, 1.0, 0.0], 0)]).unwrap();
        assert!((l - 1e-15f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn empty_or_unlabelled_is_an_error() {
        assert!(log_loss(&[]).is_err());
        let mut r = rec([0.2, 0.3, 0.5], 0);
        r.truth = None;
        assert!(log_loss(&[r]).is_err());
    }

    #[test]
    fn permutation_and_duplication_invariance() {
        let rs = vec![rec([0.2, 0.3, 0.5], 2), rec([0.7, 0.2, 0.1], 1), rec([0.1, 0.1, 0.8], 0)];
        let base = log_loss(&rs).unwrap();
        let mut rev = rs.clone();
        rev.reverse();
        assert!((log_loss(&rev).unwrap() - base).abs() < 1e-15);
        let doubled: Vec<_> = rs.iter().chain(&rs).cloned().collect();
        assert!((log_loss(&doubled).unwrap() - base).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let rs = vec![rec([0.1, 0.2, 0.7], 2), rec([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 0)];
        write_predictions(&path, &rs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("element_id,p0,p1,p2\n"));
        let back = read_predictions(&path).unwrap();
        assert_eq!(back[1].probs, rs[1].probs);
    }
}
