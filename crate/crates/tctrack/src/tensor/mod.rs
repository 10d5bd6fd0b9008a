//! Dense `f64` tensors and the reverse-mode computation graph built on them.
//!
//! [`Tensor`] is a plain value type: a row-major buffer plus an explicit
//! shape. All differentiable computation goes through [`Graph`], a tape
//! that records operations as they execute and replays them in reverse to
//! accumulate gradients. [`ParamStore`] owns named trainable parameters
//! and their persistent gradient buffers between optimizer steps.
//!
//! Conventions used throughout the crate:
//! - matrices are `[rows, cols]`, row-major;
//! - column vectors are `[n, 1]`, row vectors `[1, n]`, scalars `[1, 1]`;
//! - spatial feature maps are `[channels, height, width]`;
//! - convolution weights are `[out_ch, in_ch, 3, 3]`.

pub mod gradcheck;
pub mod graph;
pub mod params;

#[cfg(test)]
mod tests_ops;

pub use gradcheck::{check_gradients, GradReport};
pub use graph::{Graph, Var};
pub use params::{Init, ParamStore, Parameter};

use crate::error::{Error, Result};

/// A dense, row-major tensor of `f64` with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching data buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != data.len() {
            return Err(Error::Contract(format!(
                "tensor shape {:?} implies {} elements but {} were given",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// A tensor of zeros with the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    /// A `rows x cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// A `[1, 1]` scalar.
    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1, 1], data: vec![v] }
    }

    /// The shape as a slice of extents.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Read-only view of the underlying buffer.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the underlying buffer.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Total number of elements.
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2, "rows() on non-matrix");
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2, "cols() on non-matrix");
        self.shape[1]
    }

    /// Element `(r, c)` of a 2-D tensor.
    pub fn get2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2, "get2() on non-matrix");
        self.data[r * self.shape[1] + c]
    }

    /// True when every entry is finite (no NaN, no infinity).
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Single value of a `[1, 1]` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.data[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_buffer() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn accessors_agree_with_layout() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
        assert_eq!(t.get2(0, 2), 3.0);
        assert_eq!(t.get2(1, 0), 4.0);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn finite_check_spots_nan_and_inf() {
        let mut t = Tensor::zeros(&[2, 2]);
        assert!(t.is_finite());
        t.data_mut()[3] = f64::NAN;
        assert!(!t.is_finite());
        t.data_mut()[3] = f64::INFINITY;
        assert!(!t.is_finite());
    }
}
