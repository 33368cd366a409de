//! Dense row-major tensor.
//!
//! There is no implicit broadcasting: every op that mixes shapes is explicit
//! at the graph level (`add_bias`, `scale_by`, ...). A tensor that carries
//! `requires_grad` is a trainable parameter; `grad` is filled in by
//! [`crate::graph::Graph::accumulate_param_grads`] after a backward pass.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dim {
                op: "from_vec",
                detail: alloc::format!("shape {shape:?} does not hold {} elements", data.len()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::ZERO; numel], requires_grad: false, grad: None }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// Normal(0, std) initialization; draws in f64 so the stream of values is
    /// the same under both precisions.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| T::from_f64(rng.normal() * std)).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn param(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the raw buffer; shape is unchanged, and any stale
    /// gradient is dropped by the callers that mutate values (optimizer).
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dim {
                op: "reshape",
                detail: alloc::format!("cannot view {:?} as {shape:?}", self.shape),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: None,
        })
    }

    /// Adds `g` into the stored gradient, allocating zeros first if needed.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![T::ZERO; self.data.len()]);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += *b;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn describe(&self) -> String {
        alloc::format!("{:?}", self.shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_invariant() {
        let t = Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::from_vec(&[0], vec![]).is_err());
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap().param();
        t.accumulate_grad(&[1.0, 1.0]);
        t.accumulate_grad(&[0.5, -1.0]);
        assert_eq!(t.grad.as_deref().unwrap(), &[1.5, 0.0]);
        t.zero_grad();
        assert!(t.grad.is_none());
    }

    #[test]
    fn randn_deterministic() {
        let mut r1 = Rng::new(0);
        let mut r2 = Rng::new(0);
        let a = Tensor::<f32>::randn(&[4], 0.02, &mut r1);
        let b = Tensor::<f32>::randn(&[4], 0.02, &mut r2);
        assert_eq!(a.data(), b.data());
    }
}
