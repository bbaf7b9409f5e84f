//! Minimal dense row-major matrix.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "buffer of length {} cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[F]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(format!("row {i} has width {}, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: F) {
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[F]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    /// New matrix made of the given rows, in order (repeats allowed).
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: indices.len(), cols: self.cols, data }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * other^T`, i.e. (m x k) * (n x k)^T -> (m x n).
    pub fn matmul_transposed(&self, other: &Matrix<F>) -> Result<Matrix<F>> {
        if self.cols != other.cols {
            return Err(Error::dim(format!(
                "cannot multiply {}x{} by transpose of {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        F::gemm(
            self.rows,
            self.cols,
            other.rows,
            F::one(),
            &self.data,
            false,
            &other.data,
            true,
            F::zero(),
            &mut out.data,
        );
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Matrix<F> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Converts every entry to another scalar type.
    pub fn cast<G: Scalar>(&self) -> Matrix<G> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }
}

/// Squared Euclidean distance.
#[inline]
pub fn squared_distance<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn squared_norm<F: Scalar>(a: &[F]) -> F {
    a.iter().map(|&x| x * x).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_rows_rejects_ragged() {
        let rows = vec![vec![1.0, 2.0], vec![3.0]];
        assert!(matches!(Matrix::<f64>::from_rows(&rows), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_transposed_small() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0], [0.0, 2.0]]).unwrap();
        let c = a.matmul_transposed(&b).unwrap();
        assert_eq!(c.as_slice(), &[1.0, 3.0, 4.0, 3.0, 7.0, 8.0]);
    }

    #[test]
    fn select_rows_repeats() {
        let a = Matrix::from_rows(&[[1.0f64], [2.0]]).unwrap();
        assert_eq!(a.select_rows(&[1, 1, 0]).as_slice(), &[2.0, 2.0, 1.0]);
    }
}
