//! Exact k-nearest-neighbor search by linear scan.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::linalg::{squared_distance, Matrix};
use crate::scalar::Scalar;

/// Immutable index over the rows of a training matrix.
#[derive(Debug, Clone)]
pub struct KnnIndex<F> {
    points: Matrix<F>,
}

/// Neighbors sorted by `(squared distance, row index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors<F> {
    pub indices: Vec<usize>,
    pub squared_distances: Vec<F>,
}

fn by_distance_then_index<F: Scalar>(a: &(F, usize), b: &(F, usize)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

impl<F: Scalar> KnnIndex<F> {
    pub fn new(points: Matrix<F>) -> Result<Self> {
        if points.rows() == 0 || points.cols() == 0 {
            return Err(Error::data("cannot index an empty matrix"));
        }
        if !points.all_finite() {
            return Err(Error::data("index points contain NaN or infinity"));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn points(&self) -> &Matrix<F> {
        &self.points
    }

    pub fn query(&self, x: &[F], k: usize) -> Result<Neighbors<F>> {
        if k == 0 || k > self.len() {
            return Err(Error::config(format!("k = {k} must lie in 1..={}", self.len())));
        }
        if x.len() != self.dim() {
            return Err(Error::dim(format!("query width {} does not match index width {}", x.len(), self.dim())));
        }
        let mut all: Vec<(F, usize)> =
            self.points.iter_rows().enumerate().map(|(i, row)| (squared_distance(x, row), i)).collect();
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, by_distance_then_index);
            all.truncate(k);
        }
        all.sort_unstable_by(by_distance_then_index);
        let (squared_distances, indices) = all.into_iter().unzip();
        Ok(Neighbors { indices, squared_distances })
    }
}
