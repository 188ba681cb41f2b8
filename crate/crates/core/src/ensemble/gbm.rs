use serde::{Deserialize, Serialize};

use super::SparseVec;
use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbmConfig {
    pub num_rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    pub min_child_hessian: f64,
}

impl Default for GbmConfig {
    fn default() -> Self {
        GbmConfig {
            num_rounds: 100,
            learning_rate: 0.1,
            max_depth: 3,
            lambda: 1.0,
            min_child_hessian: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(t, *left).max(walk(t, *right)),
            }
        }
        walk(self, 0)
    }
}

/// One boosting round: a tree per class and the accepted step multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub trees: Vec<Tree>,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedBowModel {
    pub num_features: usize,
    pub config: GbmConfig,
    pub base_score: [f64; 3],
    pub rounds: Vec<Round>,
    /// Training log-loss before the first round and after each round.
    pub train_loss: Vec<f64>,
}

fn densify(rows: &[SparseVec], num_features: usize) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|r| {
            let mut x = vec![0.0; num_features];
            for &(f, v) in r {
                if f >= num_features {
                    return Err(Error::contract(format!(
                        "feature {f} out of range for {num_features} features"
                    )));
                }
                x[f] = v;
            }
            Ok(x)
        })
        .collect()
}

fn softmax(z: &[f64; 3]) -> [f64; 3] {
    let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.map(|v| (v - hi).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

fn mean_nll(raw: &[[f64; 3]], labels: &[usize]) -> f64 {
    raw.iter()
        .zip(labels)
        .map(|(z, &y)| -softmax(z)[y].max(1e-300).ln())
        .sum::<f64>()
        / raw.len() as f64
}

struct Grower<'d> {
    x: &'d [Vec<f64>],
    sorted: &'d [Vec<usize>],
    g: Vec<f64>,
    h: Vec<f64>,
    cfg: &'d GbmConfig,
}

impl Grower<'_> {
    fn leaf_value(&self, rows: &[usize]) -> f64 {
        let (gs, hs) = rows.iter().fold((0.0, 0.0), |(a, b), &r| (a + self.g[r], b + self.h[r]));
        -gs / (hs + self.cfg.lambda)
    }

    /// Best exact split of `rows`: (gain, feature, threshold).
    fn best_split(&self, rows: &[usize], member: &[bool]) -> Option<(f64, usize, f64)> {
        let lam = self.cfg.lambda;
        let (gt, ht) = rows.iter().fold((0.0, 0.0), |(a, b), &r| (a + self.g[r], b + self.h[r]));
        let parent = gt * gt / (ht + lam);
        let mut best: Option<(f64, usize, f64)> = None;
        for (f, order) in self.sorted.iter().enumerate() {
            let (mut gl, mut hl) = (0.0, 0.0);
            let mut prev: Option<f64> = None;
            for &r in order.iter().filter(|&&r| member[r]) {
                let v = self.x[r][f];
                if let Some(p) = prev {
                    if v > p && hl >= self.cfg.min_child_hessian && ht - hl >= self.cfg.min_child_hessian {
                        let (gr, hr) = (gt - gl, ht - hl);
                        let gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent;
                        if gain > 1e-12 && best.is_none_or(|(b, _, _)| gain > b) {
                            best = Some((gain, f, 0.5 * (p + v)));
                        }
                    }
                }
                gl += self.g[r];
                hl += self.h[r];
                prev = Some(v);
            }
        }
        best
    }

    fn grow(&self, rows: Vec<usize>, depth: usize, nodes: &mut Vec<Node>) -> usize {
        let id = nodes.len();
        nodes.push(Node::Leaf(self.leaf_value(&rows)));
        if depth >= self.cfg.max_depth || rows.len() < 2 {
            return id;
        }
        let mut member = vec![false; self.x.len()];
        for &r in &rows {
            member[r] = true;
        }
        if let Some((_, feature, threshold)) = self.best_split(&rows, &member) {
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[i][feature] <= threshold);
            let left = self.grow(l, depth + 1, nodes);
            let right = self.grow(r, depth + 1, nodes);
            nodes[id] = Node::Split {
                feature,
                threshold,
                left,
                right,
            };
        }
        id
    }
}

/// Multiclass gradient boosting with softmax loss: each round fits one
/// Newton-leaf regression tree per class to the softmax residuals. A round
/// whose full step would raise the training loss is halved until it does not
/// (down to a zero step), so training loss never increases.
pub fn gbm_train(
    features: &[SparseVec],
    labels: &[usize],
    num_features: usize,
    cfg: &GbmConfig,
    exec: Exec,
) -> Result<BoostedBowModel> {
    if cfg.num_rounds == 0 {
        return Err(Error::contract("num_rounds must be at least 1"));
    }
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::contract(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= 3) {
        return Err(Error::contract(format!("label {y} outside 0..3")));
    }
    let mut counts = [0usize; 3];
    labels.iter().for_each(|&y| counts[y] += 1);
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::contract("boosting needs at least two distinct labels"));
    }
    let x = densify(features, num_features)?;
    let n = x.len();
    let sorted: Vec<Vec<usize>> = (0..num_features)
        .map(|f| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let base_score = counts.map(|c| ((c as f64 + 1.0) / (n as f64 + 3.0)).ln());
    let mut raw = vec![base_score; n];
    let mut loss = mean_nll(&raw, labels);
    let mut train_loss = vec![loss];
    let mut rounds = Vec::with_capacity(cfg.num_rounds);
    for _ in 0..cfg.num_rounds {
        let probs: Vec<[f64; 3]> = raw.iter().map(softmax).collect();
        let trees = exec.map_range(3, |c| {
            let g = (0..n).map(|i| probs[i][c] - f64::from(u8::from(labels[i] == c))).collect();
            let h = (0..n).map(|i| (probs[i][c] * (1.0 - probs[i][c])).max(1e-16)).collect();
            let grower = Grower {
                x: &x,
                sorted: &sorted,
                g,
                h,
                cfg,
            };
            let mut nodes = Vec::new();
            grower.grow((0..n).collect(), 0, &mut nodes);
            Tree { nodes }
        });
        let delta: Vec<[f64; 3]> = x
            .iter()
            .map(|xi| [0, 1, 2].map(|c| cfg.learning_rate * trees[c].predict(xi)))
            .collect();
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let trial: Vec<[f64; 3]> = raw
                .iter()
                .zip(&delta)
                .map(|(z, d)| [z[0] + step * d[0], z[1] + step * d[1], z[2] + step * d[2]])
                .collect();
            let l = mean_nll(&trial, labels);
            if l <= loss {
                accepted = Some((trial, l));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((trial, l)) => {
                raw = trial;
                loss = l;
            }
            None => step = 0.0,
        }
        train_loss.push(loss);
        rounds.push(Round { trees, step });
    }
    Ok(BoostedBowModel {
        num_features,
        config: cfg.clone(),
        base_score,
        rounds,
        train_loss,
    })
}

pub fn gbm_predict(model: &BoostedBowModel, features: &[SparseVec]) -> Result<Vec<[f64; 3]>> {
    let x = densify(features, model.num_features)?;
    Ok(x.iter()
        .map(|xi| {
            let mut z = model.base_score;
            for r in &model.rounds {
                for (zc, tree) in z.iter_mut().zip(&r.trees) {
                    *zc += model.config.learning_rate * r.step * tree.predict(xi);
                }
            }
            softmax(&z)
        })
        .collect())
}
