//! ALiBi linear-bias positional scheme.
//!
//! Each head h of H receives slope `m_h = 2^(-8(h+1)/H)`, and attending
//! from position i to position j costs `-m_h * (i - j)` added to the
//! attention logits before softmax. The causal mask is fused in as -inf
//! above the diagonal, so one additive bias tensor carries both.

use super::{ModelError, Result};
use crate::numerics::Tensor;

/// Per-head slope schedule, strictly decreasing in head index.
#[derive(Debug, Clone, PartialEq)]
pub struct AlibiSchedule {
    slopes: Vec<f32>,
}

impl AlibiSchedule {
    pub fn slopes(&self) -> &[f32] {
        &self.slopes
    }

    pub fn slope(&self, head: usize) -> f32 {
        self.slopes[head]
    }

    pub fn n_heads(&self) -> usize {
        self.slopes.len()
    }
}

/// Slope schedule for a power-of-two head count.
///
/// Non-power-of-two counts are rejected rather than interpolated; the
/// subject architecture only uses powers of two.
pub fn alibi_slopes(n_heads: usize) -> Result<AlibiSchedule> {
    if n_heads == 0 || !n_heads.is_power_of_two() || n_heads > 32 {
        return Err(ModelError::BadHeadCount(n_heads));
    }
    let slopes = (0..n_heads)
        .map(|h| {
            let exponent = -8.0 * (h as f64 + 1.0) / n_heads as f64;
            2f64.powf(exponent) as f32
        })
        .collect();
    Ok(AlibiSchedule { slopes })
}

/// Additive attention bias for one head: `-slope * (i - j)` at or below
/// the diagonal, -inf above it (causal mask fused in).
pub fn alibi_bias(seq_len: usize, slope: f32) -> Tensor {
    let mut bias = Tensor::zeros(&[seq_len, seq_len]);
    for i in 0..seq_len {
        for j in 0..seq_len {
            let v = if j <= i {
                -slope * (i - j) as f32
            } else {
                f32::NEG_INFINITY
            };
            bias.set2(i, j, v);
        }
    }
    bias
}
