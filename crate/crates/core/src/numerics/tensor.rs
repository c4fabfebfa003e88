//! Row-major f32 tensor with explicit shape.

use super::{kernels, NumericsError, Result};

/// `sqrt(2)` at f64 precision, used by the erf formulation of GELU.
pub const GELU_SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Dense row-major 32-bit-float array. `product(shape) == data.len()` always.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Takes ownership of the buffer. Panics on length/shape mismatch
    /// (programmer error, not a runtime condition).
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() requires a single-element tensor");
        self.data[0]
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(NumericsError::RankMismatch {
                context: "dims2",
                expected: 2,
                got: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn at2(&self, i: usize, j: usize) -> f32 {
        let cols = self.shape[self.shape.len() - 1];
        self.data[i * cols + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, value: f32) {
        let cols = self.shape[self.shape.len() - 1];
        self.data[i * cols + j] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Tensor, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                context,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Untaped matrix product; the tape operation delegates here.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(NumericsError::InnerDimMismatch { lhs_k: k, rhs_k: k2 });
        }
        let mut out = Tensor::zeros(&[m, n]);
        kernels::matmul(&self.data, &other.data, &mut out.data, m, k, n);
        Ok(out)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.ensure_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, c: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * c).collect(),
        }
    }

    pub fn l2_norm(&self) -> f32 {
        let mut acc = 0.0f64;
        for &v in &self.data {
            acc += (v as f64) * (v as f64);
        }
        acc.sqrt() as f32
    }
}

/// erf via the complementary-error-function rational approximation
/// (absolute error ~1.2e-7, below f32 resolution).
pub fn erf(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let tau = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        1.0 - tau
    } else {
        tau - 1.0
    }
}

/// exp(x) for non-positive-ish arguments via 2^(n+f) with a degree-6
/// Taylor kernel; relative error ~2e-7. Pure f32 arithmetic, so results
/// are bit-deterministic across platforms, unlike libm's expf.
#[inline]
pub(crate) fn fast_exp(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2: f32 = std::f32::consts::LN_2;
    // branchless: arguments below -126 ln2 flush toward zero through the
    // clamp, and our callers never pass large positive values
    let y = (x * LOG2E).clamp(-126.0, 127.5);
    let n = y.round();
    let g = (y - n) * LN2;
    let p = 1.0
        + g * (1.0
            + g * (0.5
                + g * (1.0 / 6.0
                    + g * (1.0 / 24.0 + g * (1.0 / 120.0 + g * (1.0 / 720.0))))));
    f32::from_bits((((n as i32) + 127) << 23) as u32) * p
}

/// Same approximation evaluated in f32 with the fast exp; this is the
/// training hot path (one call per MLP activation element, forward and
/// backward).
fn erf_f32(x: f32) -> f32 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let tau = t
        * fast_exp(
            -z * z - 1.265_512_2
                + t * (1.000_023_7
                    + t * (0.374_091_96
                        + t * (0.096_784_18
                            + t * (-0.186_288_06
                                + t * (0.278_868_07
                                    + t * (-1.135_204
                                        + t * (1.488_515_9
                                            + t * (-0.822_152_23 + t * 0.170_872_77)))))))),
        );
    // tau <= 1, so this is 1-tau for x >= 0 and tau-1 for x < 0
    (1.0 - tau).copysign(x)
}

const FRAC_1_SQRT_2_F32: f32 = std::f32::consts::FRAC_1_SQRT_2;

/// GELU with the exact erf formulation, returning `(gelu(x), Phi(x))`
/// where `Phi` is the standard normal CDF. The CDF is cached by the tape
/// so backward does not re-evaluate erf.
pub fn gelu_with_cdf(x: f32) -> (f32, f32) {
    let cdf = 0.5 * (1.0 + erf_f32(x * FRAC_1_SQRT_2_F32));
    (x * cdf, cdf)
}

/// `0.5 * x * (1 + erf(x / sqrt(2)))`.
pub fn gelu_scalar(x: f32) -> f32 {
    gelu_with_cdf(x).0
}

/// d/dx of the erf-form GELU given a saved CDF: `Phi(x) + x * phi(x)`.
pub fn gelu_grad_from_cdf(x: f32, cdf: f32) -> f32 {
    const INV_SQRT_2PI: f32 = 0.398_942_3;
    let pdf = fast_exp(-0.5 * x * x) * INV_SQRT_2PI;
    cdf + x * pdf
}

/// d/dx of the erf-form GELU.
pub fn gelu_grad_scalar(x: f32) -> f32 {
    gelu_grad_from_cdf(x, gelu_with_cdf(x).1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_is_identity() {
        let eye = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let b = Tensor::from_vec(&[3, 3], vec![2., -1., 4., 0.5, 3., 7., -2., 6., 1.]);
        assert_eq!(eye.matmul(&b).unwrap(), b);

        let a = Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]);
        let eye2 = Tensor::from_vec(&[2, 2], vec![1., 0., 0., 1.]);
        assert_eq!(a.matmul(&eye2).unwrap(), a);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matches!(
            a.matmul(&b),
            Err(NumericsError::InnerDimMismatch { lhs_k: 3, rhs_k: 4 })
        ));
    }

    #[test]
    fn erf_reference_values() {
        // rational approximation, good to ~1e-7
        assert!((erf(0.0)).abs() < 1e-6);
        assert!((erf(1.0) - 0.8427007929).abs() < 1e-6);
        assert!((erf(-1.0) + 0.8427007929).abs() < 1e-6);
        assert!((erf(2.0) - 0.9953222650).abs() < 1e-6);
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // gelu(x) -> x for large x, -> 0 for very negative x
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-5);
        assert!(gelu_scalar(-10.0).abs() < 1e-5);
        // gelu(1) = 0.5 * (1 + erf(1/sqrt2)) = 0.841345
        assert!((gelu_scalar(1.0) - 0.841345).abs() < 1e-5);
    }
}
