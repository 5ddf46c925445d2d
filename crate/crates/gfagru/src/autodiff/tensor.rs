use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
///
/// Tensors are one- or two-dimensional. Elementwise binary operations
/// broadcast along any axis of extent one (scalar, row vector, column
/// vector), mirroring the usual 2-D broadcasting rules.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("rank must be 1 or 2, got {:?}", shape),
            });
        }
        let len: usize = shape.iter().product();
        if len == 0 {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("empty extent in {:?}", shape),
            });
        }
        if len != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {:?} needs {} values, got {}", shape, len, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; len])
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Result<Self> {
        let len: usize = shape.iter().product();
        Tensor::new(shape, vec![v; len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// View as (rows, cols); rank-1 tensors are row vectors.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1]),
        }
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

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[r * cols + c]
    }

    pub fn first_nonfinite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Broadcast-compatible output shape for elementwise binary ops.
    pub fn broadcast_dims(a: &Tensor, b: &Tensor, op: &'static str) -> Result<(usize, usize)> {
        let (ra, ca) = a.dims2();
        let (rb, cb) = b.dims2();
        let rows = match (ra, rb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    detail: format!("cannot broadcast {:?} with {:?}", a.shape, b.shape),
                })
            }
        };
        let cols = match (ca, cb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    detail: format!("cannot broadcast {:?} with {:?}", a.shape, b.shape),
                })
            }
        };
        Ok((rows, cols))
    }
}

/// Flat index of element (r, c) under broadcasting of `t` to a larger shape.
#[inline]
pub(crate) fn bcast_index(t: &Tensor, r: usize, c: usize) -> usize {
    let (rows, cols) = t.dims2();
    let ri = if rows == 1 { 0 } else { r };
    let ci = if cols == 1 { 0 } else { c };
    ri * cols + ci
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![1, 2, 3], vec![0.0; 6]).is_err());
    }

    #[test]
    fn dims2_treats_rank1_as_row() {
        let v = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(v.dims2(), (1, 3));
        let m = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        assert_eq!(m.dims2(), (2, 3));
        assert_eq!(m.at(1, 2), 0.0);
    }

    #[test]
    fn broadcast_rules() {
        let m = Tensor::matrix(4, 3, vec![0.0; 12]).unwrap();
        let col = Tensor::matrix(4, 1, vec![0.0; 4]).unwrap();
        let row = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        let s = Tensor::scalar(1.0);
        assert_eq!(Tensor::broadcast_dims(&m, &col, "t").unwrap(), (4, 3));
        assert_eq!(Tensor::broadcast_dims(&m, &row, "t").unwrap(), (4, 3));
        assert_eq!(Tensor::broadcast_dims(&m, &s, "t").unwrap(), (4, 3));
        assert_eq!(Tensor::broadcast_dims(&col, &row, "t").unwrap(), (4, 3));
        let bad = Tensor::matrix(4, 2, vec![0.0; 8]).unwrap();
        assert!(Tensor::broadcast_dims(&m, &bad, "t").is_err());
    }
}
