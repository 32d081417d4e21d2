//! Dense 64-bit tensors with reverse-mode automatic differentiation.
//!
//! The substrate for every network in this crate: a [`Tensor`] is an
//! immutable n-dimensional array of `f64`, and a [`Tape`] records operations
//! so that [`Tape::backward`] can replay them in reverse and fill in
//! gradients. 64-bit precision is deliberate — it makes the crate's
//! finite-difference gradient checks meaningful.

mod adam;
mod fft;
mod serialize;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use serialize::{read_tensor, read_tensor_file, write_tensor, write_tensor_file};
pub use tape::{Tape, Var};

use std::sync::Arc;

use crate::error::{AffectError, Result};
use crate::rng::Rng;

/// Padding policy for convolutions.
///
/// `Same` pads with zeros so that the output covers `ceil(T / stride)`
/// positions, splitting the padding symmetrically with the extra sample on
/// the right when the total is odd. `Valid` never pads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

impl Padding {
    /// (pad_left, pad_right) for a given input length, kernel size, stride.
    pub fn amounts(self, len: usize, kernel: usize, stride: usize) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let out = len.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(len);
                (total / 2, total - total / 2)
            }
        }
    }
}

/// Dense row-major tensor. Data is shared, never mutated in place by
/// operations; `grad`, when present, accumulates gradients for parameters.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(AffectError::dim(format!(
                "shape {:?} wants {} elements, data has {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; n]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        }
    }

    /// Variance-scaled (He) normal initialization for weights feeding a
    /// rectifier: std = gain * sqrt(2 / fan_in).
    pub fn he_normal(shape: Vec<usize>, fan_in: usize, gain: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let data: Vec<f64> = (0..n).map(|_| rng.normal() * std).collect();
        Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform init in [-bound, bound], the usual recurrent-layer scheme.
    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.range(-bound, bound)).collect();
        Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    /// Overwrite the values (used by the optimizer). Clones only if the
    /// buffer is shared with a live tape.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(AffectError::dim(format!(
                "set_data: expected {} elements, got {}",
                self.numel(),
                data.len()
            )));
        }
        self.data = Arc::new(data);
        Ok(())
    }

    /// Zero (allocating if needed) the gradient accumulator.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|x| *x = 0.0),
            None => self.grad = Some(vec![0.0; self.numel()]),
        }
    }

    /// Add `delta` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.numel() {
            return Err(AffectError::dim(format!(
                "accumulate_grad: expected {} elements, got {}",
                self.numel(),
                delta.len()
            )));
        }
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.numel()]);
        }
        let g = self.grad.as_mut().unwrap();
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement_enforced() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn same_padding_splits_with_extra_on_right() {
        // kernel 80, stride 1: total pad 79 -> 39 left, 40 right
        assert_eq!(Padding::Same.amounts(96_000, 80, 1), (39, 40));
        // odd kernel pads evenly
        assert_eq!(Padding::Same.amounts(10, 3, 1), (1, 1));
        // stride 2 keeps ceil semantics: 96 -> 48 outputs for 7x7
        let (l, r) = Padding::Same.amounts(96, 7, 2);
        assert_eq!((96 + l + r - 7) / 2 + 1, 48);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::from_vec(vec![1.0, 2.0]);
        t.zero_grad();
        t.accumulate_grad(&[0.5, 0.25]).unwrap();
        t.accumulate_grad(&[0.5, 0.25]).unwrap();
        assert_eq!(t.grad.as_deref().unwrap(), &[1.0, 0.5]);
    }
}
