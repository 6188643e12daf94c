//! Dense tensors, reverse-mode differentiation and a finite-difference
//! gradient verifier.

pub mod checkpoint;
pub mod kernels;
mod tape;
mod tensor;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use kernels::{masked_softmax, matmul, transpose};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("row {0} has no allowed attention entry")]
    FullyMaskedRow(usize),
    #[error("loss is not on this tape")]
    Detached,
}

/// Denominator floor for relative errors, so that coordinates whose true
/// gradient is ~0 are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub n_checked: usize,
    /// (tensor index, flat offset, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares `analytic` gradients against central differences of `loss` over
/// a seeded subsample of at least `min_coords` coordinates.
///
/// Every tensor contributes at least a few coordinates; the remainder is
/// spread proportionally to tensor size. `params` is restored on return.
pub fn check_gradients<F>(
    params: &mut [Tensor],
    analytic: &[Tensor],
    mut loss: F,
    min_coords: usize,
    eps: f64,
    seed: u64,
) -> GradCheckReport
where
    F: FnMut(&[Tensor]) -> f64,
{
    let total: usize = params.iter().map(Tensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (t, p) in params.iter().enumerate() {
        let share = (min_coords * p.len()).div_ceil(total.max(1));
        let k = share.max(4).min(p.len());
        coords.extend(sample(&mut rng, p.len(), k).into_iter().map(|i| (t, i)));
    }

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        n_checked: 0,
        worst: None,
    };
    for (t, i) in coords {
        let orig = params[t].data()[i];
        params[t].data_mut()[i] = orig + eps;
        let plus = loss(params);
        params[t].data_mut()[i] = orig - eps;
        let minus = loss(params);
        params[t].data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[t].data()[i];
        let err = relative_error(a, numeric);
        report.n_checked += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some((t, i, a, numeric));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::mask::{causal_mask, AttentionMask};

    fn mat(r: usize, c: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(f).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_shape() {
        let a = mat(3, 3, |i| i as f64 * 0.5 - 1.0);
        assert_eq!(matmul(&Tensor::identity(3), &a).unwrap(), a);
        let b = mat(2, 3, |i| i as f64);
        let c = mat(3, 4, |i| i as f64);
        assert_eq!(matmul(&b, &c).unwrap().shape(), &[2, 4]);
        assert!(matmul(&c, &b).is_err());
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!((g.get(x).unwrap().data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn linear_map_gradient_matches_differences() {
        let x = mat(2, 3, |i| (i as f64 * 0.37).sin());
        let w = mat(3, 4, |i| (i as f64 * 0.91).cos());
        let eval = |ps: &[Tensor]| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(ps[0].clone());
            let y = tape.matmul(xv, wv).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let s = tape.sum(sq);
            (tape.value(s).data()[0], tape, wv, s)
        };
        let (_, tape, wv, s) = eval(std::slice::from_ref(&w));
        let analytic = tape.backward(s).unwrap().get(wv).unwrap().clone();
        let mut params = vec![w.clone()];
        let report = check_gradients(&mut params, &[analytic], |ps| eval(ps).0, 12, 1e-5, 1);
        assert_eq!(report.n_checked, 12);
        assert!(report.max_relative_error < 1e-6, "{report:?}");
        assert_eq!(params[0], w);
    }

    #[test]
    fn softmax_degenerate_rows() {
        let scores = mat(3, 3, |i| i as f64);
        let diag = AttentionMask::from_fn(3, |j, k| j == k);
        let y = masked_softmax(&scores, &diag).unwrap();
        assert_eq!(y, Tensor::identity(3));

        let uniform = Tensor::filled(&[3, 3], 0.7);
        let y = masked_softmax(&uniform, &AttentionMask::all_true(3)).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let blocked = AttentionMask::from_fn(3, |j, _| j != 1);
        assert_eq!(
            masked_softmax(&uniform, &blocked),
            Err(NumericsError::FullyMaskedRow(1))
        );
    }

    #[test]
    fn softmax_matches_scalar_formula() {
        let scores = Tensor::matrix(1, 3, vec![2.0, 1.0, 0.0]).unwrap();
        // Padded to a square matrix; only row 0 matters.
        let sq = Tensor::matrix(3, 3, [scores.data(), &[0.0; 6]].concat()).unwrap();
        let y = masked_softmax(&sq, &AttentionMask::all_true(3)).unwrap();
        let z = 1.0 + (-1.0f64).exp() + (-2.0f64).exp();
        let expected = [1.0 / z, (-1.0f64).exp() / z, (-2.0f64).exp() / z];
        for (a, b) in y.row(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blocked_scores_get_zero_gradient() {
        let mask = Arc::new(causal_mask(4).unwrap());
        let scores = mat(4, 4, |i| ((i * 7) % 5) as f64 * 0.3);
        let weights = mat(4, 4, |i| (i as f64).sin());
        let run = |s: &Tensor| {
            let mut tape = Tape::new();
            let sv = tape.leaf(s.clone());
            let wv = tape.leaf(weights.clone());
            let p = tape.masked_softmax(sv, &mask).unwrap();
            let y = tape.mul(p, wv).unwrap();
            let l = tape.sum(y);
            let val = tape.value(l).data()[0];
            let g = tape.backward(l).unwrap().get(sv).unwrap().clone();
            (val, g)
        };
        let (base, g) = run(&scores);
        for j in 0..4 {
            for k in (j + 1)..4 {
                assert_eq!(g.at(j, k), 0.0);
                let mut bumped = scores.clone();
                bumped.data_mut()[j * 4 + k] += 10.0;
                assert_eq!(run(&bumped).0, base);
            }
        }
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(3, 8, |i| (i as f64 * 1.3).sin() * 4.0 + i as f64));
        let g = tape.leaf(Tensor::filled(&[1, 8], 1.0));
        let b = tape.leaf(Tensor::zeros(&[1, 8]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for r in 0..3 {
            let row = tape.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let ce = tape.cross_entropy(l, 0).unwrap();
        assert!((tape.value(ce).data()[0] - 2f64.ln()).abs() < 1e-15);
        assert!(tape.cross_entropy(l, 2).is_err());

        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let l = tape.leaf(Tensor::matrix(1, 3, vec![margin, 0.0, 0.0]).unwrap());
            let ce = tape.cross_entropy(l, 0).unwrap();
            let v = tape.value(ce).data()[0];
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-20);

        let l = tape.leaf(Tensor::matrix(1, 4, vec![0.3, -1.0, 2.0, 0.5]).unwrap());
        let ce = tape.cross_entropy(l, 1).unwrap();
        let g = tape.backward(ce).unwrap();
        let s: f64 = g.get(l).unwrap().data().iter().sum();
        assert!(s.abs() < 1e-15);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(2, 2, |i| i as f64));
        let z = tape.scale(x, 0.0);
        let s = tape.sum(z);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heads_round_trip() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(3, 8, |i| i as f64));
        let heads = tape.split_heads(x, 4).unwrap();
        assert_eq!(tape.value(heads[1]).row(0), &[2.0, 3.0]);
        let y = tape.concat_heads(&heads).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert!(tape.split_heads(x, 3).is_err());
        let t = tape.transpose(x);
        assert_eq!(tape.value(t).shape(), &[8, 3]);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf(mat(4, 3, |i| (i as f64 * 0.7).sin()));
            let b = tape.leaf(mat(3, 4, |i| (i as f64 * 0.3).cos()));
            let c = tape.matmul(a, b).unwrap();
            let m = Arc::new(causal_mask(4).unwrap());
            let p = tape.masked_softmax(c, &m).unwrap();
            let r = tape.relu(p);
            let s = tape.sum(r);
            let g = tape.backward(s).unwrap();
            (g.get(a).unwrap().clone(), g.get(b).unwrap().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn detached_and_nonscalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(2, 2, |i| i as f64));
        assert!(matches!(tape.backward(x), Err(NumericsError::Shape(_))));
        let other = {
            let mut t = Tape::new();
            for _ in 0..5 {
                t.leaf(Tensor::scalar(1.0));
            }
            t.leaf(Tensor::scalar(1.0))
        };
        assert_eq!(tape.backward(other).unwrap_err(), NumericsError::Detached);
    }
}
