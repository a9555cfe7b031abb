//! Dense row-major tensors. Rank 0/1/2 cover everything the model needs.

use super::Scalar;
use crate::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(invalid(format!("zero-sized dimension in shape {shape:?}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); n],
        }
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

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Number of rows when viewed as a matrix (rank-1 tensors are 1 x n).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn item(&self) -> F {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Raw matmul with optional transposes. `a` is (am x ak) stored row-major
/// before transposition, likewise `b`.
pub(crate) fn matmul_raw<F: Scalar>(
    a: &[F],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[F],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
) -> (Vec<F>, usize, usize) {
    let (m, k) = if trans_a { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (kb, n) = if trans_b { (b_cols, b_rows) } else { (b_rows, b_cols) };
    debug_assert_eq!(k, kb, "inner dimensions must agree");
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = if trans_a { a[p * a_cols + i] } else { a[i * a_cols + p] };
            if av == F::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            if trans_b {
                for (j, o) in row.iter_mut().enumerate() {
                    *o = *o + av * b[j * b_cols + p];
                }
            } else {
                let brow = &b[p * b_cols..p * b_cols + n];
                for (o, &bv) in row.iter_mut().zip(brow.iter()) {
                    *o = *o + av * bv;
                }
            }
        }
    }
    (out, m, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let (out, m, n) = matmul_raw(&eye, 2, 2, false, &x, 2, 2, false);
        assert_eq!((m, n), (2, 2));
        assert_eq!(out, x);
    }

    #[test]
    fn matmul_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        // a^T b = [[26,30],[38,44]]
        let (out, _, _) = matmul_raw(&a, 2, 2, true, &b, 2, 2, false);
        assert_eq!(out, vec![26.0, 30.0, 38.0, 44.0]);
        // a b^T = [[17,23],[39,53]]
        let (out, _, _) = matmul_raw(&a, 2, 2, false, &b, 2, 2, true);
        assert_eq!(out, vec![17.0, 23.0, 39.0, 53.0]);
    }
}
