use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Dense row-major tensor. Rank 1 (`[n]`) and rank 2 (`[rows, cols]`) cover
/// everything the pipeline needs; a scalar is a one-element vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    values: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, values.len(), "shape {shape:?} does not match value count {}", values.len());
        Tensor { shape, values }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, values: vec![S::zero(); n] }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], values: vec![v] }
    }

    pub fn vector(values: Vec<S>) -> Self {
        Tensor { shape: vec![values.len()], values }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<S>) -> Self {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() needs a rank-2 tensor, got shape {:?}", self.shape);
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() needs a rank-2 tensor, got shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.values.len(), 1, "item() needs exactly one element, shape {:?}", self.shape);
        self.values[0]
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
