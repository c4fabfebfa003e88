//! Trainable parameters and boolean gradient masks.

use super::tensor::Tensor;
use super::{NumericsError, Result};

/// Boolean tensor marking trainable elements, shaped like its parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn all_true(shape: &[usize]) -> Self {
        Mask {
            shape: shape.to_vec(),
            data: vec![true; shape.iter().product()],
        }
    }

    pub fn all_false(shape: &[usize]) -> Self {
        Mask {
            shape: shape.to_vec(),
            data: vec![false; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<bool>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Mask {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn set2(&mut self, i: usize, j: usize, value: bool) {
        let cols = self.shape[self.shape.len() - 1];
        self.data[i * cols + j] = value;
    }

    pub fn count_trainable(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any_trainable(&self) -> bool {
        self.data.iter().any(|&b| b)
    }
}

/// A value tensor with its gradient accumulator and trainable mask.
///
/// Invariants: all three have the same shape, and after [`apply_mask`]
/// the gradient is exactly zero wherever the mask is false.
///
/// [`apply_mask`]: Parameter::apply_mask
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable_mask: Mask,
}

impl Parameter {
    /// New parameter with zero gradient and an all-true mask.
    pub fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            grad: Tensor::zeros(&shape),
            trainable_mask: Mask::all_true(&shape),
            value,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    /// Add `delta` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, delta: &Tensor) -> Result<()> {
        if delta.shape() != self.value.shape() {
            return Err(NumericsError::ShapeMismatch {
                context: "accumulate_grad",
                lhs: self.value.shape().to_vec(),
                rhs: delta.shape().to_vec(),
            });
        }
        for (g, &d) in self.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
        Ok(())
    }

    /// Zero the gradient exactly where the mask is false; untouched elsewhere.
    pub fn apply_mask(&mut self) {
        for (g, &keep) in self.grad.data_mut().iter_mut().zip(self.trainable_mask.data()) {
            if !keep {
                *g = 0.0;
            }
        }
    }

    pub fn set_mask(&mut self, mask: Mask) {
        assert_eq!(mask.shape(), self.value.shape(), "mask shape mismatch");
        self.trainable_mask = mask;
    }
}
