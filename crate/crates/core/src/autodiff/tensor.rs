//! Dense row-major f64 tensors used as graph values and parameters.

use super::graph::GraphError;

/// Row-major tensor. Graph operations require rank 2; checkpoints may carry
/// any rank (a calibrated quantizer step is stored as a rank-1 singleton).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, GraphError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(GraphError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} wants {expect} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, GraphError> {
        Self::new(vec![rows, cols], data)
    }

    /// 1×n row vector.
    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Self { shape: vec![1, n], data }
    }

    /// 1×1 scalar.
    pub fn scalar(x: f64) -> Self {
        Self { shape: vec![1, 1], data: vec![x] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// (rows, cols) view; errors unless the tensor has rank 2.
    pub fn as_matrix(&self) -> Result<(usize, usize), GraphError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(GraphError::Shape {
                op: "as_matrix",
                detail: format!("rank-2 tensor required, got shape {other:?}"),
            }),
        }
    }

    /// Entry (r, c) of a rank-2 tensor. Panics on rank/bounds violations; use
    /// only where the shape was already validated.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> Result<f64, GraphError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(GraphError::Shape {
                op: "item",
                detail: format!("single-element tensor required, got shape {:?}", self.shape),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.get(0, 2), 3.0);
        assert_eq!(t.get(1, 0), 4.0);
        assert_eq!(t.as_matrix().unwrap(), (2, 3));
    }

    #[test]
    fn item_requires_singleton() {
        assert_eq!(Tensor::scalar(4.5).item().unwrap(), 4.5);
        assert!(Tensor::zeros(vec![2, 2]).item().is_err());
    }
}
