//! Dense tensors and matrices used by the model IR and the evaluators.
//!
//! Real-mode arithmetic is 64-bit floating point; integer mode stores
//! quantizer codes as `i64` with an explicit width tag so results are
//! bit-reproducible across platforms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element storage for a [`Tensor`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TensorData {
    /// 64-bit floating point values.
    Real(Vec<f64>),
    /// Two's-complement integer codes with an explicit bit width.
    Int { bits: u32, codes: Vec<i64> },
}

/// An n-dimensional dense tensor (row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn real(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if values.len() != expect {
            return Err(Error::InvalidModel(format!(
                "tensor data length {} does not match shape {:?} (product {})",
                values.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor {
            shape,
            data: TensorData::Real(values),
        })
    }

    pub fn int(shape: Vec<usize>, bits: u32, codes: Vec<i64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if codes.len() != expect {
            return Err(Error::InvalidModel(format!(
                "tensor data length {} does not match shape {:?} (product {})",
                codes.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor {
            shape,
            data: TensorData::Int { bits, codes },
        })
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_real(&self) -> Result<&[f64]> {
        match &self.data {
            TensorData::Real(v) => Ok(v),
            TensorData::Int { .. } => Err(Error::InvalidModel(
                "expected a real tensor, found integer codes".into(),
            )),
        }
    }

    pub fn as_codes(&self) -> Result<&[i64]> {
        match &self.data {
            TensorData::Int { codes, .. } => Ok(codes),
            TensorData::Real(_) => Err(Error::InvalidModel(
                "expected an integer tensor, found real values".into(),
            )),
        }
    }
}

/// A dense row-major matrix of reals. Rows index outputs, columns inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidModel(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = self * x (matrix-vector product).
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::InvalidModel(format!(
                "matvec: vector length {} does not match {} columns",
                x.len(),
                self.cols
            )));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(w, a)| w * a).sum())
            .collect())
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_len_must_match_shape() {
        assert!(Tensor::real(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::real(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matvec_identity() {
        let m = Matrix::identity(3);
        let y = m.matvec(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(y, vec![1.0, -2.0, 3.0]);
    }
}
