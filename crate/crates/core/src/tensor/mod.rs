//! Dense `f64` tensors and a tape-based reverse-mode differentiation graph.
//!
//! [`Tensor`] is a plain value. Differentiable computations are recorded on a
//! [`Graph`], which hands out lightweight [`Var`] handles for every recorded
//! node. The graph is rebuilt for every forward pass; calling
//! [`Graph::backward`] consumes it.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, GradCheckReport};
pub(crate) use graph::{cross_entropy_row, dlr_row};
pub use graph::{Gradients, Graph, Var};

use ndarray::{Array1, Array2, ArrayD, ArrayView2, IxDyn};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    data: ArrayD<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major values.
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![values.len()],
            });
        }
        let data = ArrayD::from_shape_vec(IxDyn(shape), values).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(Self { data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            data: ArrayD::from_elem(IxDyn(&[]), value),
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Self {
            data: Array1::from(values.to_vec()).into_dyn(),
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "matrix",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            values.extend_from_slice(r);
        }
        Self::new(&[rows.len(), cols], values)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            data: ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn from_array(data: ArrayD<f64>) -> Self {
        Self { data }
    }

    pub fn from_matrix(m: Array2<f64>) -> Self {
        Self { data: m.into_dyn() }
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn array(&self) -> &ArrayD<f64> {
        &self.data
    }

    pub fn array_mut(&mut self) -> &mut ArrayD<f64> {
        &mut self.data
    }

    pub fn into_array(self) -> ArrayD<f64> {
        self.data
    }

    /// Row-major copy of the values.
    pub fn to_vec(&self) -> Vec<f64> {
        self.data.iter().copied().collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Shape {
                op: "item",
                lhs: self.shape().to_vec(),
                rhs: vec![1],
            });
        }
        Ok(*self.data.iter().next().expect("one element"))
    }

    pub fn as_matrix(&self) -> Result<ArrayView2<'_, f64>> {
        as_matrix(&self.data)
    }

    pub fn into_matrix(self) -> Result<Array2<f64>> {
        let shape = self.shape().to_vec();
        self.data.into_dimensionality().map_err(|_| Error::Shape {
            op: "into_matrix",
            lhs: shape,
            rhs: vec![0, 0],
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl From<Array2<f64>> for Tensor {
    fn from(m: Array2<f64>) -> Self {
        Self::from_matrix(m)
    }
}

impl From<Array1<f64>> for Tensor {
    fn from(v: Array1<f64>) -> Self {
        Self { data: v.into_dyn() }
    }
}

pub(crate) fn as_matrix(a: &ArrayD<f64>) -> Result<ArrayView2<'_, f64>> {
    a.view().into_dimensionality().map_err(|_| Error::Shape {
        op: "matrix view",
        lhs: a.shape().to_vec(),
        rhs: vec![0, 0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::new(&[2, 3], vec![0.0; 5]), Err(Error::Shape { .. })));
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn item_requires_single_element() {
        assert_eq!(Tensor::scalar(4.0).item().unwrap(), 4.0);
        assert!(Tensor::vector(&[1.0, 2.0]).item().is_err());
    }
}
