use crate::corpus::EncodedEssay;
use crate::error::{Error, Result};
use crate::eval::{predict_discourse, Averaging, PredictionRecord};
use crate::model::ModelParams;

/// Where member outputs are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BagSpace {
    #[default]
    Probability,
    /// Mean of log-probabilities, re-softmaxed (ablation).
    LogProbability,
}

/// Averages aligned per-element predictions from several members.
pub fn bag_predict(members: &[Vec<PredictionRecord>], space: BagSpace) -> Result<Vec<PredictionRecord>> {
    let Some(first) = members.first() else {
        return Err(Error::contract("bagging needs at least one member"));
    };
    for (k, m) in members.iter().enumerate() {
        if m.len() != first.len() || m.iter().zip(first).any(|(a, b)| a.element_id != b.element_id) {
            return Err(Error::contract(format!("member {k} predicts a different element list")));
        }
    }
    let n = members.len() as f64;
    Ok((0..first.len())
        .map(|i| {
            let mut acc = [0.0; 3];
            for m in members {
                for (a, p) in acc.iter_mut().zip(m[i].probs) {
                    *a += match space {
                        BagSpace::Probability => p,
                        BagSpace::LogProbability => p.max(crate::eval::CLIP).ln(),
                    };
                }
            }
            let probs = match space {
                BagSpace::Probability => {
                    let mean = acc.map(|v| v / n);
                    let s: f64 = mean.iter().sum();
                    mean.map(|v| v / s)
                }
                BagSpace::LogProbability => {
                    let mean = acc.map(|v| v / n);
                    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e = mean.map(|v| (v - hi).exp());
                    let s: f64 = e.iter().sum();
                    e.map(|v| v / s)
                }
            };
            PredictionRecord {
                probs,
                missing_tokens: members.iter().any(|m| m[i].missing_tokens),
                ..first[i].clone()
            }
        })
        .collect())
}

/// Runs every member on `encoded` and bags the results.
pub fn bag_models(members: &[ModelParams], encoded: &EncodedEssay, space: BagSpace) -> Result<Vec<PredictionRecord>> {
    if let Some(m) = members.iter().find(|m| m.config.num_classes != 3) {
        return Err(Error::contract(format!(
            "member has {} output classes, expected 3",
            m.config.num_classes
        )));
    }
    let preds = members
        .iter()
        .map(|m| predict_discourse(m, encoded, Averaging::Probability))
        .collect::<Result<Vec<_>>>()?;
    bag_predict(&preds, space)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, p: [f64; 3]) -> PredictionRecord {
        PredictionRecord {
            essay_id: "e".into(),
            element_id: id.into(),
            probs: p,
            truth: Some(0),
            missing_tokens: false,
        }
    }

    #[test]
    fn mean_of_two_one_hots() {
        let out = bag_predict(
            &[vec![rec("a", [1.0, 0.0, 0.0])], vec![rec("a", [0.0, 1.0, 0.0])]],
            BagSpace::Probability,
        )
        .unwrap();
        assert_eq!(out[0].probs, [0.5, 0.5, 0.0]);
    }

    #[test]
    fn single_member_is_identity() {
        let m = vec![rec("a", [0.2, 0.3, 0.5]), rec("b", [0.6, 0.1, 0.3])];
        let out = bag_predict(std::slice::from_ref(&m), BagSpace::Probability).unwrap();
        for (a, b) in out.iter().zip(&m) {
            for c in 0..3 {
                assert!((a.probs[c] - b.probs[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn misaligned_members_rejected() {
        let r = bag_predict(&[vec![rec("a", [1.0, 0.0, 0.0])], vec![rec("b", [1.0, 0.0, 0.0])]], BagSpace::Probability);
        assert!(r.is_err());
        assert!(bag_predict(&[], BagSpace::Probability).is_err());
    }

    #[test]
    fn log_space_is_normalized() {
        let out = bag_predict(
            &[vec![rec("a", [0.7, 0.2, 0.1])], vec![rec("a", [0.1, 0.2, 0.7])]],
            BagSpace::LogProbability,
        )
        .unwrap();
        assert!((out[0].probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((out[0].probs[0] - out[0].probs[2]).abs() < 1e-12);
    }
}
