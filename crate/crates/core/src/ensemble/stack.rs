use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::{Gradients, ParamStore, Tape, Tensor, Var};
use crate::training::{adam_step, OptimizerState, TrainConfig};

/// Stacking input for one element: a probability triple per source (fold
/// members first, the BoW model last) and the data partitions each source
/// was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackRow {
    pub element_id: String,
    /// Partition the element belongs to (a fold index, or a holdout id).
    pub partition: usize,
    pub label: Option<usize>,
    pub sources: Vec<[f64; 3]>,
    pub trained_on: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StackConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// L2 penalty on first-layer weights.
    pub weight_decay: f64,
    /// Outputs are clamped to this floor before row normalization.
    pub floor: f64,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            hidden: 16,
            epochs: 300,
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            floor: 1e-9,
        }
    }
}

/// One-hidden-layer ReLU network over concatenated source triples, output
/// clamped and row-normalized into probabilities.
///
/// Inputs are shifted by `center` first. A probability triple that barely
/// varies is otherwise collinear with the bias, and its weights drift along
/// with every bias update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackModel {
    pub num_sources: usize,
    pub hidden: usize,
    pub floor: f64,
    #[serde(default)]
    pub center: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl StackModel {
    /// Starts as plain averaging of the member sources (all but the last):
    /// hidden units 0..3 carry the member mean of each class straight
    /// through, the rest start silent. Uncentered; see [`Self::centered`].
    pub fn averaging(num_sources: usize, hidden: usize, floor: f64) -> Result<Self> {
        if num_sources < 2 || hidden < 3 {
            return Err(Error::contract(format!(
                "stacking needs ≥2 sources and ≥3 hidden units, got {num_sources} and {hidden}"
            )));
        }
        let members = num_sources - 1;
        let inputs = 3 * num_sources;
        let mut w1 = vec![0.0; inputs * hidden];
        for m in 0..members {
            for c in 0..3 {
                w1[(3 * m + c) * hidden + c] = 1.0 / members as f64;
            }
        }
        let b1 = (0..hidden).map(|j| if j < 3 { 0.0 } else { 0.1 }).collect();
        let mut w2 = vec![0.0; hidden * 3];
        for c in 0..3 {
            w2[c * 3 + c] = 1.0;
        }
        Ok(StackModel {
            num_sources,
            hidden,
            floor,
            center: vec![0.0; inputs],
            w1,
            b1,
            w2,
            b2: vec![0.0; 3],
        })
    }

    /// Averaging model over inputs shifted by `center`; the pass-through
    /// units get the member mean of the center as bias, so predictions are
    /// unchanged.
    pub fn centered(num_sources: usize, hidden: usize, floor: f64, center: Vec<f64>) -> Result<Self> {
        let mut m = Self::averaging(num_sources, hidden, floor)?;
        if center.len() != 3 * num_sources {
            return Err(Error::contract(format!(
                "center has {} entries, expected {}",
                center.len(),
                3 * num_sources
            )));
        }
        let members = (num_sources - 1) as f64;
        for c in 0..3 {
            m.b1[c] = (0..num_sources - 1).map(|s| center[3 * s + c]).sum::<f64>() / members;
        }
        m.center = center;
        Ok(m)
    }

    fn store(&self) -> ParamStore {
        let mut s = ParamStore::new(0);
        let inputs = 3 * self.num_sources;
        s.add("w1", Tensor::new(vec![inputs, self.hidden], self.w1.clone()).expect("w1 shape"));
        s.add("b1", Tensor::new(vec![self.hidden], self.b1.clone()).expect("b1 shape"));
        s.add("w2", Tensor::new(vec![self.hidden, 3], self.w2.clone()).expect("w2 shape"));
        s.add("b2", Tensor::new(vec![3], self.b2.clone()).expect("b2 shape"));
        s
    }

    fn absorb(&mut self, s: &ParamStore) {
        self.w1 = s.get(0).data().to_vec();
        self.b1 = s.get(1).data().to_vec();
        self.w2 = s.get(2).data().to_vec();
        self.b2 = s.get(3).data().to_vec();
    }

    /// L1 norm of the first-layer weights reading source `s`.
    pub fn block_l1(&self, s: usize) -> f64 {
        self.w1[3 * s * self.hidden..3 * (s + 1) * self.hidden]
            .iter()
            .map(|v| v.abs())
            .sum()
    }
}

fn inputs(rows: &[StackRow], num_sources: usize, center: &[f64]) -> Result<Vec<f64>> {
    let mut x = Vec::with_capacity(rows.len() * 3 * num_sources);
    for r in rows {
        if r.sources.len() != num_sources {
            return Err(Error::contract(format!(
                "element {} has {} sources, model expects {num_sources}",
                r.element_id,
                r.sources.len()
            )));
        }
        x.extend(r.sources.iter().flatten().zip(center).map(|(v, c)| v - c));
    }
    Ok(x)
}

/// Returns the clamped (unnormalized) outputs and their row-normalized probabilities.
fn forward<'a>(tape: &mut Tape<'a>, store: &ParamStore, x: &[f64], n: usize, floor: f64) -> Result<(Var, Var)> {
    let cols = x.len() / n.max(1);
    let xv = tape.constant(&[n, cols], x.to_vec());
    let (w1, b1, w2, b2) = (tape.param(store, 0), tape.param(store, 1), tape.param(store, 2), tape.param(store, 3));
    let h = tape.matmul(xv, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, w2)?;
    let o = tape.add_row(o, b2)?;
    let o = tape.clamp_min(o, floor);
    let p = tape.row_normalize(o);
    Ok((o, p))
}

/// Rejects any row whose own partition is among a source's training partitions.
pub fn check_leakage(rows: &[StackRow]) -> Result<()> {
    for r in rows {
        if r.trained_on.len() != r.sources.len() {
            return Err(Error::contract(format!(
                "element {} lists provenance for {} of {} sources",
                r.element_id,
                r.trained_on.len(),
                r.sources.len()
            )));
        }
        if let Some(s) = r.trained_on.iter().position(|t| t.contains(&r.partition)) {
            return Err(Error::contract(format!(
                "leakage: source {s} was trained on partition {} containing element {}",
                r.partition, r.element_id
            )));
        }
    }
    Ok(())
}

/// Full-batch Adam on mean log loss, starting from [`StackModel::centered`]
/// around the training rows' column means.
pub fn stack_train(rows: &[StackRow], cfg: &StackConfig) -> Result<StackModel> {
    let Some(first) = rows.first() else {
        return Err(Error::contract("stacking needs at least one training row"));
    };
    check_leakage(rows)?;
    let labels: Vec<usize> = rows
        .iter()
        .map(|r| {
            r.label
                .filter(|&y| y < 3)
                .ok_or_else(|| Error::contract(format!("element {} has no usable label", r.element_id)))
        })
        .collect::<Result<_>>()?;
    let k = first.sources.len();
    let mut center = inputs(rows, k, &vec![0.0; 3 * k])?
        .chunks(3 * k)
        .fold(vec![0.0; 3 * k], |mut acc, r| {
            acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
            acc
        });
    center.iter_mut().for_each(|c| *c /= rows.len() as f64);
    let mut model = StackModel::centered(k, cfg.hidden, cfg.floor, center)?;
    let n = rows.len();
    let x = inputs(rows, k, &model.center)?;
    let pick: Rc<[usize]> = labels.iter().enumerate().map(|(i, &y)| 3 * i + y).collect();
    let mut store = model.store();
    let mut state = OptimizerState::new(&store);
    let adam = TrainConfig::default();
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new().with_exec(Exec::Sequential);
        let (o, p) = forward(&mut tape, &store, &x, n, cfg.floor)?;
        // Normalization makes the loss blind to output scale, so Adam can
        // drift every output into the clamp; anchor row sums near 1.
        let ones = tape.constant(&[3, 1], vec![1.0; 3]);
        let sums = tape.matmul(o, ones)?;
        let target = tape.constant(&[n, 1], vec![1.0; n]);
        let dev = tape.sub(sums, target)?;
        let dev2 = tape.mul(dev, dev)?;
        let anchor = tape.mean(dev2);
        let lp = tape.ln(p)?;
        let picked = tape.gather(lp, pick.clone(), &[n, 1])?;
        let total = tape.sum(picked);
        let nll = tape.scale(total, -1.0 / n as f64);
        let mut loss = tape.add(nll, anchor)?;
        if cfg.weight_decay > 0.0 {
            let w1 = tape.param(&store, 0);
            let sq = tape.mul(w1, w1)?;
            let sq = tape.sum(sq);
            let pen = tape.scale(sq, cfg.weight_decay);
            loss = tape.add(loss, pen)?;
        }
        let grads: Gradients = tape.backward(loss)?;
        adam_step(&mut store, &grads, &mut state, &adam, cfg.learning_rate)?;
    }
    model.absorb(&store);
    Ok(model)
}

pub fn stack_predict(model: &StackModel, rows: &[StackRow]) -> Result<Vec<[f64; 3]>> {
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let center = if model.center.is_empty() {
        vec![0.0; 3 * model.num_sources]
    } else {
        model.center.clone()
    };
    let x = inputs(rows, model.num_sources, &center)?;
    let store = model.store();
    let mut tape = Tape::new().with_exec(Exec::Sequential);
    let (_, p) = forward(&mut tape, &store, &x, rows.len(), model.floor)?;
    Ok(tape.value(p).chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(sources: Vec<[f64; 3]>, label: usize) -> StackRow {
        let k = sources.len();
        StackRow {
            element_id: "x".into(),
            partition: 9,
            label: Some(label),
            sources,
            trained_on: vec![vec![0, 1]; k],
        }
    }

    #[test]
    fn initial_model_is_the_member_average() {
        let rows = vec![
            row(vec![[0.2, 0.3, 0.5], [0.6, 0.3, 0.1], [0.9, 0.05, 0.05]], 0),
            row(vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.3, 0.3, 0.4]], 1),
        ];
        let m = StackModel::averaging(3, 16, 1e-9).unwrap();
        let p = stack_predict(&m, &rows).unwrap();
        let expect = [[0.4, 0.3, 0.3], [0.5, 0.5, 0.0]];
        for (a, b) in p.iter().zip(expect) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-8, "{a:?}");
            }
        }
        assert_eq!(m.block_l1(2), 0.0);
        assert!((m.block_l1(0) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn leakage_is_rejected() {
        let mut r = row(vec![[0.2, 0.3, 0.5], [0.3, 0.3, 0.4]], 0);
        r.trained_on[1].push(9);
        let err = stack_train(&[r], &StackConfig::default()).unwrap_err().to_string();
        assert!(err.contains("leakage"));
    }

    #[test]
    fn training_reduces_loss() {
        let rows: Vec<StackRow> = (0..30)
            .map(|i| {
                let y = i % 3;
                let mut good = [0.2; 3];
                good[y] = 0.6;
                row(vec![good, [0.34, 0.33, 0.33]], y)
            })
            .collect();
        let labels: Vec<usize> = rows.iter().map(|r| r.label.unwrap()).collect();
        let before = stack_predict(&StackModel::averaging(2, 16, 1e-9).unwrap(), &rows).unwrap();
        let m = stack_train(&rows, &StackConfig::default()).unwrap();
        let after = stack_predict(&m, &rows).unwrap();
        let ll = |p: &[[f64; 3]]| crate::eval::log_loss_rows(p, &labels).unwrap();
        assert!(ll(&after) < ll(&before), "{} vs {}", ll(&after), ll(&before));
        for r in &after {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
