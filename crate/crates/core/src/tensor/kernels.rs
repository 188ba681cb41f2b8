//! Plain slice kernels shared by the tape's forward and backward passes.

use crate::exec::Exec;

/// Multiply-add count above which matrix kernels split rows across threads.
const PAR_WORK: usize = 1 << 18;

fn pick(exec: Exec, work: usize) -> Exec {
    if work >= PAR_WORK {
        exec
    } else {
        Exec::Sequential
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    pick(exec, m * k * n).for_each_row(&mut out, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    pick(exec, m * k * n).for_each_row(&mut out, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o = acc;
        }
    });
    out
}

/// `a[m×k]ᵀ · b[m×n]`, producing `k×n`.
pub fn matmul_tn(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    pick(exec, m * k * n).for_each_row(&mut out, n, |p, row| {
        for i in 0..m {
            let av = a[i * k + p];
            let b_row = &b[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    out
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        let lse = log_sum_exp(row);
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Per-row mean and reciprocal standard deviation. A zero denominator yields
/// `rstd = 0`, which maps constant rows to zero instead of NaN.
pub fn row_moments(x: &[f64], cols: usize, eps: f64) -> Vec<(f64, f64)> {
    x.chunks(cols)
        .map(|row| {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let denom = (var + eps).sqrt();
            let rstd = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            (mean, rstd)
        })
        .collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
