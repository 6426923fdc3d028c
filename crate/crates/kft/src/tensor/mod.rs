//! Dense tensor algebra: the row-major float64 value carrier plus the mode
//! products, chained last-mode contraction and Khatri-Rao/Kronecker helpers
//! everything else is built on.

mod ops;

pub use ops::{chain_last_mode, hadamard, kron_modes_matvec, mode_product, transposed_khatri_rao};

use crate::error::{KftError, Result};
use serde::{Deserialize, Serialize};

/// Dimension selector for mode products. `Last` mirrors the ×₋₁ convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Index(usize),
    Last,
}

impl Axis {
    pub fn resolve(self, order: usize) -> Result<usize> {
        let idx = match self {
            Axis::Index(i) => i,
            Axis::Last => order.checked_sub(1).ok_or(KftError::AxisOutOfRange {
                axis: 0,
                order: 0,
            })?,
        };
        if idx >= order {
            return Err(KftError::AxisOutOfRange { axis: idx, order });
        }
        Ok(idx)
    }
}

/// Row-major dense float64 tensor. `data.len()` always equals the product of
/// the extents; every extent is at least 1. Order-0 tensors hold one scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(KftError::ShapeMismatch(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(KftError::ShapeMismatch(format!(
                "data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![1.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// n×n identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(KftError::ShapeMismatch("empty row list".into()));
        }
        let c = rows[0].len();
        if rows.iter().any(|row| row.len() != c) {
            return Err(KftError::ShapeMismatch("ragged rows".into()));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Self::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Extent along `axis`.
    pub fn extent(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < ext, "index {ix} out of range {ext} at axis {i}");
            off = off * ext + ix;
        }
        off
    }

    /// Reinterpret with a new shape of identical total size. Cheap: row-major
    /// layout means no data movement.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(KftError::ShapeMismatch(format!(
                "cannot reshape {:?} (len {}) into {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(KftError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Matrix product for order-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.order() != 2 || other.order() != 2 || self.shape[1] != other.shape[0] {
            return Err(KftError::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Self::new(vec![m, n], out)
    }

    /// Transpose for order-2 tensors.
    pub fn transpose(&self) -> Result<Self> {
        if self.order() != 2 {
            return Err(KftError::ShapeMismatch(format!(
                "transpose needs order 2, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(DenseTensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(DenseTensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = DenseTensor::new(vec![2, 3], (0..6).map(|x| x as f64).collect()).unwrap();
        assert_eq!(t.get(&[0, 0]), 0.0);
        assert_eq!(t.get(&[0, 2]), 2.0);
        assert_eq!(t.get(&[1, 0]), 3.0);
    }

    #[test]
    fn matmul_small() {
        let a = DenseTensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = DenseTensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }
}
