//! Central finite-difference gradient oracle.
//!
//! This never touches the tape: it only evaluates the given scalar
//! function repeatedly, so agreement with `backward` is an independent
//! check of every differentiable primitive.

use super::tensor::Tensor;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Default step for 32-bit precision: balances truncation against
/// round-off in the central-difference quotient.
pub const DEFAULT_FD_STEP: f32 = 1e-3;

/// Central-difference estimate of `df/dx` for a deterministic scalar `f`.
///
/// Each element is perturbed independently on its own clone of `x`, so the
/// estimate for element i never sees the perturbation of element j; the
/// parallel path is bit-identical to the sequential one.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f32) -> Tensor
where
    F: Fn(&Tensor) -> f32 + Sync,
{
    let probe = |i: usize| {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        (f(&plus) as f64 - f(&minus) as f64) as f32 / (2.0 * h)
    };

    #[cfg(feature = "parallel")]
    let data: Vec<f32> = (0..x.numel()).into_par_iter().map(probe).collect();
    #[cfg(not(feature = "parallel"))]
    let data: Vec<f32> = (0..x.numel()).map(probe).collect();

    Tensor::from_vec(x.shape(), data)
}

/// Relative disagreement between two gradient tensors, elementwise with a
/// unit floor: `|a - b| / max(|a|, |b|, 1)`. Returns the worst element.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f32::max)
}

/// Norm-based relative disagreement: `||a - b|| / max(||a||, ||b||, eps)`.
/// Fairer than elementwise for whole-parameter gradients where individual
/// entries can be tiny.
pub fn norm_rel_err(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape());
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        diff += ((x - y) as f64).powi(2);
        na += (x as f64).powi(2);
        nb += (y as f64).powi(2);
    }
    (diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-12)) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_all_ones() {
        let x = Tensor::from_vec(&[2, 3], vec![0.3, -0.7, 1.2, 0.0, 2.0, -1.5]);
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, DEFAULT_FD_STEP);
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn gradient_of_dot_with_self_is_two_x() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        let g = finite_diff_grad(
            |t| t.data().iter().map(|v| v * v).sum(),
            &x,
            DEFAULT_FD_STEP,
        );
        assert!((g.data()[0] - 2.0).abs() < 1e-2);
        assert!((g.data()[1] - 4.0).abs() < 1e-2);
    }
}
