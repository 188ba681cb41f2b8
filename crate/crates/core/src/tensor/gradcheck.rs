//! Central finite-difference oracle for tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor in the relative error, so near-zero gradients compare absolutely.
    pub floor: f64,
    /// Tensors with more elements than this are probed along random directions.
    pub max_exhaustive: usize,
    pub probes: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            floor: 1e-3,
            max_exhaustive: 200,
            probes: 2,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Worst {
    pub param: String,
    /// Coordinate index, or `None` for a random-projection probe.
    pub coordinate: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checks: usize,
    pub worst: Option<Worst>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn eval<F>(f: &F, store: &ParamStore, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new().with_seed(seed).with_exec(Exec::Sequential);
    let loss = f(&mut tape, store)?;
    Ok(tape.scalar(loss))
}

/// Compares tape gradients of `f` against central differences for every
/// parameter in `store`. Every evaluation of `f` gets a fresh tape seeded
/// with `opts.seed`, which freezes dropout masks across the perturbed runs.
pub fn finite_diff_check<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var> + Sync + Send,
{
    let first = eval(&f, store, opts.seed)?;
    let second = eval(&f, store, opts.seed)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::contract(format!(
            "function under check is not deterministic ({first} vs {second})"
        )));
    }

    let mut tape = Tape::new().with_seed(opts.seed).with_exec(Exec::Sequential);
    let loss = f(&mut tape, store)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::contract("finite_diff_check needs a scalar loss"));
    }
    let grads = tape.backward(loss)?;

    let h = opts.step;
    let per_tensor = opts.exec.map_range(store.len(), |id| -> Result<Vec<Worst>> {
        let key = store.key(id);
        let numel = store.get(id).numel();
        let analytic = grads
            .param(key)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; numel]);
        let mut local = store.clone();
        let mut out = Vec::new();
        if numel <= opts.max_exhaustive {
            for (c, &a) in analytic.iter().enumerate() {
                let orig = local.get(id).data()[c];
                local.get_mut(id).data_mut()[c] = orig + h;
                let lp = eval(&f, &local, opts.seed)?;
                local.get_mut(id).data_mut()[c] = orig - h;
                let lm = eval(&f, &local, opts.seed)?;
                local.get_mut(id).data_mut()[c] = orig;
                let numeric = (lp - lm) / (2.0 * h);
                out.push(Worst {
                    param: store.name(id).to_string(),
                    coordinate: Some(c),
                    analytic: a,
                    numeric,
                    rel_error: rel_error(a, numeric, opts.floor),
                });
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (id as u64).wrapping_mul(0x9e37_79b9));
            let base = store.get(id).data().to_vec();
            for _ in 0..opts.probes {
                let mut u: Vec<f64> = (0..numel).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                u.iter_mut().for_each(|v| *v /= norm);
                let shift = |sign: f64, local: &mut ParamStore| {
                    for ((d, b), ui) in local.get_mut(id).data_mut().iter_mut().zip(&base).zip(&u) {
                        *d = b + sign * h * ui;
                    }
                };
                shift(1.0, &mut local);
                let lp = eval(&f, &local, opts.seed)?;
                shift(-1.0, &mut local);
                let lm = eval(&f, &local, opts.seed)?;
                local.get_mut(id).data_mut().copy_from_slice(&base);
                let numeric = (lp - lm) / (2.0 * h);
                let a: f64 = analytic.iter().zip(&u).map(|(g, ui)| g * ui).sum();
                out.push(Worst {
                    param: store.name(id).to_string(),
                    coordinate: None,
                    analytic: a,
                    numeric,
                    rel_error: rel_error(a, numeric, opts.floor),
                });
            }
        }
        Ok(out)
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checks: 0,
        worst: None,
    };
    for result in per_tensor {
        for w in result? {
            report.checks += 1;
            if report.worst.is_none() || w.rel_error > report.max_rel_error {
                report.max_rel_error = w.rel_error;
                report.worst = Some(w);
            }
        }
    }
    Ok(report)
}
