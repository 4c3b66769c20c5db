//! Dense 2-D row-major tensor. Everything the model touches is a matrix
//! (vectors are 1 x n or n x 1, scalars 1 x 1), so two dimensions suffice.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone)]
pub struct Tensor<R> {
    rows: usize,
    cols: usize,
    data: Arc<Vec<R>>,
}

impl<R: Real> Tensor<R> {
    /// Builds a tensor, rejecting size mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<R>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "tensor {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {v} in {rows}x{cols} tensor"
            )));
        }
        Ok(Tensor {
            rows,
            cols,
            data: Arc::new(data),
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: Arc::new(vec![R::zero(); rows * cols]),
        }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::new(rows, cols, data.iter().map(|&v| R::cast_from(v)).collect())
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let flat: Vec<R> = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| R::cast_from(v)))
            .collect();
        Self::new(rows.len(), cols, flat)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    /// Shared handle to the backing buffer (cheap clone onto the tape).
    pub fn shared(&self) -> Arc<Vec<R>> {
        Arc::clone(&self.data)
    }

    /// Mutable view; clones the buffer only if it is aliased.
    pub fn data_mut(&mut self) -> &mut [R] {
        Arc::<Vec<R>>::make_mut(&mut self.data)
    }

    pub fn at(&self, r: usize, c: usize) -> R {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.cast_f64()).collect()
    }
}
