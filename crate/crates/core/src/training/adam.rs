use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamStore};

use super::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having a zero gradient. Any non-finite gradient aborts the
/// update before anything is modified.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut OptimizerState, cfg: &TrainConfig, lr: f64) -> Result<()> {
    for (id, name, _) in store.iter() {
        if let Some(g) = grads.param(store.key(id)) {
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    name: name.to_string(),
                    index,
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for id in 0..store.len() {
        let key = store.key(id);
        let g = grads.param(key);
        let (m, v) = (&mut state.m[id], &mut state.v[id]);
        let data = store.get_mut(id).data_mut();
        for i in 0..data.len() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            data[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}
