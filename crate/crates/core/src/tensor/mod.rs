//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Calling [`Graph::backward`] on a scalar node walks the tape in reverse,
//! producing per-node gradients and accumulating parameter gradients into a
//! [`ParamStore`].
//!
//! Values are held in `f64`. Parameters are kept `f32`-representable at rest
//! (see [`ParamStore::round_to_f32`]) so that checkpoints, which store raw
//! `f32`, round-trip exactly.

mod conv;
mod gradcheck;
mod graph;
mod param;

pub use gradcheck::{grad_check, relative_error};
pub use graph::{Gradients, Graph, Var};
pub use param::{ParamId, Parameter, ParamStore};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch, {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: invalid argument, {detail}")]
    Argument { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major n-dimensional array of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::DataLength { shape, len: self.data.len() });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Returns (channels, height, width) for a rank-3 tensor.
    pub fn chw(&self) -> Option<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Some((c, h, w)),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::DataLength { .. })
        ));
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn reshape_keeps_data() {
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let r = t.clone().reshape(vec![1, 2, 2]).unwrap();
        assert_eq!(r.chw(), Some((1, 2, 2)));
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(vec![3]).is_err());
    }
}
