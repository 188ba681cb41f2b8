use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::AwpConfig;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{classification_logits, encoder_layers, ForwardOptions, ModelParams};
use crate::tensor::{kernels, Gradients, ParamStore, Tape, Tensor, Var};

/// Anything that owns a [`ParamStore`] AWP can perturb.
pub trait HasParams {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl HasParams for ParamStore {
    fn params(&self) -> &ParamStore {
        self
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        self
    }
}

impl HasParams for ModelParams {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

/// Per-tensor AWP offset `γ · g / (‖g‖ + eps)`; tensors without a gradient get none.
pub fn awp_offsets(store: &ParamStore, grads: &Gradients, cfg: &AwpConfig) -> Vec<Option<Vec<f64>>> {
    (0..store.len())
        .map(|id| {
            let g = grads.param(store.key(id))?;
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let k = cfg.perturb_scale / (norm + cfg.eps);
            Some(g.iter().map(|v| k * v).collect())
        })
        .collect()
}

/// Moves the weights along the normalized gradient, runs `recompute` at the
/// perturbed point and puts the original weights back bit for bit, whether
/// or not `recompute` succeeded.
pub fn awp_perturbed_grads<T: HasParams, R>(
    target: &mut T,
    grads: &Gradients,
    cfg: &AwpConfig,
    recompute: impl FnOnce(&T) -> Result<R>,
) -> Result<R> {
    let saved = target.params().clone();
    let offsets = awp_offsets(&saved, grads, cfg);
    {
        let store = target.params_mut();
        for (id, off) in offsets.iter().enumerate() {
            if let Some(off) = off {
                for (w, d) in store.get_mut(id).data_mut().iter_mut().zip(off) {
                    *w += d;
                }
            }
        }
    }
    let out = recompute(target);
    *target.params_mut() = saved;
    out
}

/// Sum over selected rows of `KL(p‖q) + KL(q‖p)` for row-softmax distributions
/// of the two logit matrices.
pub fn symmetric_kl(tape: &mut Tape<'_>, p_logits: Var, q_logits: Var, rows: &[bool]) -> Result<Var> {
    let shape = tape.shape(p_logits).to_vec();
    if shape != tape.shape(q_logits) || shape.len() != 2 || rows.len() != shape[0] {
        return Err(Error::Shape {
            op: "symmetric_kl",
            left: shape,
            right: tape.shape(q_logits).to_vec(),
        });
    }
    let lp = tape.log_softmax_rows(p_logits);
    let lq = tape.log_softmax_rows(q_logits);
    let p = tape.softmax_rows(p_logits);
    let q = tape.softmax_rows(q_logits);
    let dp = tape.sub(p, q)?;
    let dl = tape.sub(lp, lq)?;
    let terms = tape.mul(dp, dl)?;
    let mask: Vec<f64> = rows
        .iter()
        .flat_map(|&r| std::iter::repeat_n(if r { 1.0 } else { 0.0 }, shape[1]))
        .collect();
    let mask = tape.constant(&shape, mask);
    let kept = tape.mul(terms, mask)?;
    Ok(tape.sum(kept))
}

/// A SiFT perturbation of one essay's embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SiftPerturbation {
    /// `LN(x) + δ`.
    pub normalized: Tensor,
    /// `δ`, with Frobenius norm equal to the perturbation scale.
    pub delta: Tensor,
    /// `σ ⊙ δ`: what adding `δ` in normalized space does to the raw input.
    pub input_shift: Tensor,
}

/// Row-wise standardization without affine terms, plus the per-row scale.
fn normalize_rows(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let (n, d) = x.dims2()?;
    let mut out = vec![0.0; n * d];
    let mut sigma = Vec::with_capacity(n);
    for (r, (mean, rstd)) in kernels::row_moments(x.data(), d, eps).into_iter().enumerate() {
        for c in 0..d {
            out[r * d + c] = (x.get2(r, c) - mean) * rstd;
        }
        sigma.push(if rstd > 0.0 { 1.0 / rstd } else { 0.0 });
    }
    Ok((Tensor::new(vec![n, d], out)?, sigma))
}

/// Layer-normalizes `embeddings` and adds a perturbation of norm `scale`
/// along `grad_estimate`. A zero estimate falls back to the all-ones direction.
pub fn sift_perturb(embeddings: &Tensor, grad_estimate: &Tensor, scale: f64, ln_eps: f64) -> Result<SiftPerturbation> {
    if embeddings.shape() != grad_estimate.shape() {
        return Err(Error::Shape {
            op: "sift_perturb",
            left: embeddings.shape().to_vec(),
            right: grad_estimate.shape().to_vec(),
        });
    }
    let (normalized, sigma) = normalize_rows(embeddings, ln_eps)?;
    let d = embeddings.shape()[1];
    let norm = grad_estimate.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let delta: Vec<f64> = if norm > 0.0 {
        grad_estimate.data().iter().map(|g| scale * g / norm).collect()
    } else {
        let k = scale / (grad_estimate.numel() as f64).sqrt();
        vec![k; grad_estimate.numel()]
    };
    let shape = embeddings.shape().to_vec();
    let shifted: Vec<f64> = normalized.data().iter().zip(&delta).map(|(a, b)| a + b).collect();
    let input_shift: Vec<f64> = delta.iter().enumerate().map(|(i, v)| sigma[i / d] * v).collect();
    Ok(SiftPerturbation {
        normalized: Tensor::new(shape.clone(), shifted)?,
        delta: Tensor::new(shape.clone(), delta)?,
        input_shift: Tensor::new(shape, input_shift)?,
    })
}

/// Gradient of the consistency loss with respect to a small random
/// normalized-space perturbation, evaluated in eval mode.
pub fn sift_grad_estimate(
    m: &ModelParams,
    embeddings: &Tensor,
    clean_logits: &Tensor,
    rows: &[bool],
    seed: u64,
) -> Result<Tensor> {
    let (_, sigma) = normalize_rows(embeddings, m.config.layer_norm_eps)?;
    let shape = embeddings.shape().to_vec();
    let d = shape[1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Tensor::normal(&shape, 1e-3, &mut rng).with_grad();
    let mut tape = Tape::new().with_exec(Exec::Sequential);
    let u = tape.leaf(&start);
    let sig: Vec<f64> = (0..start.numel()).map(|i| sigma[i / d]).collect();
    let sig = tape.constant(&shape, sig);
    let shift = tape.mul(sig, u)?;
    let x = tape.constant(&shape, embeddings.data().to_vec());
    let h0 = tape.add(x, shift)?;
    let h = encoder_layers(&mut tape, m, h0, ForwardOptions::eval())?;
    let q = classification_logits(&mut tape, m, h, false)?;
    let p = tape.constant(clean_logits.shape(), clean_logits.data().to_vec());
    let kl = symmetric_kl(&mut tape, p, q, rows)?;
    let grads = tape.backward(kl)?;
    let g = grads.var(u).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; start.numel()]);
    Tensor::new(shape, g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_grad(store: &ParamStore) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let p = tape.param(store, 0);
        let sq = tape.mul(p, p)?;
        let l = tape.sum(sq);
        Ok((tape.scalar(l), tape.backward(l)?))
    }

    #[test]
    fn zero_gamma_matches_plain_gradient() {
        let mut store = ParamStore::new(0);
        store.add("theta", Tensor::scalar(0.3));
        let (_, g) = square_grad(&store).unwrap();
        let cfg = AwpConfig {
            perturb_scale: 0.0,
            ..AwpConfig::default()
        };
        let (_, adv) = awp_perturbed_grads(&mut store, &g, &cfg, square_grad).unwrap();
        assert_eq!(adv.param_bits(), g.param_bits());
    }

    #[test]
    fn restore_is_bitwise_even_on_error() {
        let mut store = ParamStore::new(0);
        store.add("a", Tensor::from_rows(&[&[0.1, 0.7, -3.3]]).unwrap());
        store.add("b", Tensor::scalar(1e-300));
        let before = store.value_bits();
        let mut g = Gradients::default();
        g.insert_param(store.key(0), vec![1.0, -2.0, 0.5]);
        g.insert_param(store.key(1), vec![3.0]);
        let cfg = AwpConfig {
            perturb_scale: 0.37,
            ..AwpConfig::default()
        };
        let seen = awp_perturbed_grads(&mut store, &g, &cfg, |s| Ok(s.get(0).data().to_vec())).unwrap();
        assert_ne!(seen, vec![0.1, 0.7, -3.3]);
        assert_eq!(store.value_bits(), before);
        let r: Result<()> = awp_perturbed_grads(&mut store, &g, &cfg, |_| Err(Error::contract("boom")));
        assert!(r.is_err());
        assert_eq!(store.value_bits(), before);
    }

    #[test]
    fn offsets_have_norm_gamma() {
        let mut store = ParamStore::new(0);
        store.add("w", Tensor::zeros(&[4]));
        let mut g = Gradients::default();
        g.insert_param(store.key(0), vec![3.0, 0.0, 4.0, 0.0]);
        let cfg = AwpConfig {
            perturb_scale: 0.5,
            eps: 0.0,
            ..AwpConfig::default()
        };
        let off = awp_offsets(&store, &g, &cfg)[0].clone().unwrap();
        for (a, b) in off.iter().zip([0.3, 0.0, 0.4, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn toy_minimum_adversarial_gradient_is_larger() {
        // f(θ) = θ², near the minimum at 0 the gradient grows when θ moves along it.
        for theta in [-0.2, -0.05, 0.01, 0.1] {
            let mut store = ParamStore::new(0);
            store.add("theta", Tensor::scalar(theta));
            let (_, g) = square_grad(&store).unwrap();
            let (_, adv) = awp_perturbed_grads(&mut store, &g, &AwpConfig::default(), square_grad).unwrap();
            let plain = g.param(store.key(0)).unwrap()[0];
            let advg = adv.param(store.key(0)).unwrap()[0];
            assert!(advg.abs() > plain.abs(), "θ={theta}: {advg} vs {plain}");
        }
    }

    #[test]
    fn symmetric_kl_matches_direct_sum() {
        let a = [[0.2, -1.0, 0.5], [1.0, 1.0, 1.0]];
        let b = [[0.0, 0.3, -0.5], [2.0, 0.0, 0.0]];
        let sm = |r: &[f64; 3]| {
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            r.map(|v| v.exp() / z)
        };
        let mut expect = 0.0;
        for (ra, rb) in a.iter().zip(&b) {
            let (p, q) = (sm(ra), sm(rb));
            for c in 0..3 {
                expect += p[c] * (p[c] / q[c]).ln() + q[c] * (q[c] / p[c]).ln();
            }
        }
        let mut tape = Tape::new();
        let pa = tape.constant(&[2, 3], a.iter().flatten().copied().collect());
        let pb = tape.constant(&[2, 3], b.iter().flatten().copied().collect());
        let kl = symmetric_kl(&mut tape, pa, pb, &[true, true]).unwrap();
        assert!((tape.scalar(kl) - expect).abs() < 1e-12);
        let self_kl = symmetric_kl(&mut tape, pa, pa, &[true, true]).unwrap();
        assert_eq!(tape.scalar(self_kl), 0.0);
        let first = symmetric_kl(&mut tape, pa, pb, &[true, false]).unwrap();
        assert!(tape.scalar(first) < tape.scalar(kl));
    }

    #[test]
    fn sift_delta_norm_equals_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::normal(&[5, 6], 1.0, &mut rng);
        let g = Tensor::normal(&[5, 6], 1.0, &mut rng);
        for scale in [1e-3, 0.5, 2.0] {
            let p = sift_perturb(&x, &g, scale, 1e-5).unwrap();
            let norm = p.delta.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - scale).abs() < 1e-9);
        }
        let zero = sift_perturb(&x, &Tensor::zeros(&[5, 6]), 0.25, 1e-5).unwrap();
        let norm = zero.delta.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 0.25).abs() < 1e-9);
        let none = sift_perturb(&x, &g, 0.0, 1e-5).unwrap();
        assert!(none.input_shift.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sift_normalized_rows_are_standardized() {
        let x = Tensor::from_rows(&[&[1.0, 2.0, 3.0, 4.0], &[10.0, 10.0, 10.0, 14.0]]).unwrap();
        let p = sift_perturb(&x, &Tensor::zeros(&[2, 4]), 0.0, 0.0).unwrap();
        for r in 0..2 {
            let row = p.normalized.row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }
}
