//! Slice-level kernels shared by the tape ops and their derivatives.

use crate::mask::AttentionMask;

use super::{NumericsError, Tensor};

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with four independent partial sums so it vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    if !a.is_matrix() || !b.is_matrix() || a.cols() != b.rows() {
        return Err(NumericsError::Shape(format!(
            "matmul {:?} · {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    matmul_acc(&mut out, a.data(), b.data(), m, k, n);
    Tensor::matrix(m, n, out)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::matrix(c, r, out).expect("transpose preserves size")
}

/// Row-wise softmax restricted to allowed entries. Blocked entries are
/// exactly zero and do not take part in the normalization.
pub fn masked_softmax(scores: &Tensor, mask: &AttentionMask) -> Result<Tensor, NumericsError> {
    let n = mask.len();
    if scores.rows() != n || scores.cols() != n {
        return Err(NumericsError::Shape(format!(
            "scores {:?} vs mask {n}×{n}",
            scores.shape()
        )));
    }
    let mut out = vec![0.0; n * n];
    for j in 0..n {
        let row = scores.row(j);
        let allowed = mask.row(j);
        let mut max = f64::NEG_INFINITY;
        for (&s, &a) in row.iter().zip(allowed) {
            if a && s > max {
                max = s;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(NumericsError::FullyMaskedRow(j));
        }
        let out_row = &mut out[j * n..(j + 1) * n];
        let mut total = 0.0;
        for ((o, &s), &a) in out_row.iter_mut().zip(row).zip(allowed) {
            if a {
                *o = (s - max).exp();
                total += *o;
            }
        }
        for o in out_row.iter_mut() {
            *o /= total;
        }
    }
    Tensor::matrix(n, n, out)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes each row to zero mean and unit variance, returning the
/// normalized values and per-row inverse standard deviations.
pub fn normalize_rows(x: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        for (o, v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (xhat, inv_std)
}

/// Numerically stable `log Σ exp` and the softmax of a single row.
pub fn log_softmax_parts(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let lse = max + total.ln();
    (lse, exps.into_iter().map(|e| e / total).collect())
}
