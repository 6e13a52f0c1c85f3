//! Dense f64 tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable shaped value. Operations live on a [`Tape`],
//! which records them for the backward pass; tensors that never touch a tape
//! are plain data (images, masks, parameters between updates).

mod adam;
pub(crate) mod conv;
mod checkpoint;
pub(crate) mod gemm;
mod gradcheck;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{check_gradients, relative_error, GradCheck};
pub use tape::{Gradients, Tape};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Identifies a node in a [`Tape`]. Recording order == topological order.
pub type NodeId = usize;

/// Dense N-dimensional array of f64 in row-major order.
///
/// Canonical image layout is `[batch, channels, height, width]` with batch
/// fixed at 1 throughout this crate. Data is behind an `Arc` and never
/// mutated; "updating" a parameter means replacing the whole tensor.
/// Shared `Arc`s are how parameter sharing works: a tape identifies leaf
/// tensors by data pointer, so two branches using the same parameter tensor
/// accumulate gradients into one slot.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    /// Set when this tensor is the output of a tape operation.
    pub(crate) node: Option<(u64, NodeId)>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel]),
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|i| f(i)).collect();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> &Arc<Vec<f64>> {
        &self.data
    }

    /// Scalar tensors only.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Interpret as `[n, c, h, w]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::shape(format!("expected 4-d tensor, got {other:?}"))),
        }
    }

    /// Interpret as `[rows, cols]`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::shape(format!("expected 2-d tensor, got {other:?}"))),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn shape_accessors() {
        let t = Tensor::new(vec![1, 2, 3, 4], (0..24).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.dims4().unwrap(), (1, 2, 3, 4));
        assert_eq!(t.numel(), 24);
        assert!(t.dims2().is_err());
    }

    #[test]
    fn bit_eq_detects_sign_of_zero() {
        let a = Tensor::new(vec![1], vec![0.0]).unwrap();
        let b = Tensor::new(vec![1], vec![-0.0]).unwrap();
        assert!(!a.bit_eq(&b));
        assert!(a.bit_eq(&a.clone()));
    }
}
