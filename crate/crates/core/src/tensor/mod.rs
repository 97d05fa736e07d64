//! Dense row-major f64 tensors and a reverse-mode differentiation tape.
//!
//! `Tensor` is a plain immutable value (shape + flat data). Gradient
//! tracking lives entirely in [`tape::Tape`]: a forward pass records
//! operations against one tape, `Tape::backward` consumes the tape and
//! returns a gradient map. One tape per training step, never shared.

pub mod tape;

pub use tape::{GradMap, Tape, TensorId};

use crate::error::{Error, Result};

/// Immutable n-dimensional value, flat row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::BadShape {
                op: "Tensor::new",
                expected: format!("{} elements", numel),
                got: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// 2D constructor from nested rows; rows must be equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::BadShape {
                    op: "Tensor::from_rows",
                    expected: format!("row length {}", c),
                    got: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f64>) {
        (self.shape, self.data)
    }

    /// Row-major element access for 2D tensors.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }
}

/// `a[m,k] @ b[k,n] -> out[m,n]`, accumulating into `out` (caller zeroes).
///
/// ikj loop order so the inner loop runs over contiguous rows of `b` and
/// `out`; LLVM vectorizes it. Keep this the single matmul kernel so the
/// whole crate is bit-deterministic.
pub(crate) fn matmul_accum(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_accum(a, b, m, k, n, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_raw_hand_case() {
        // [[1,2]] @ [[3],[4]] = [[11]]
        let c = matmul_raw(&[1.0, 2.0], &[3.0, 4.0], 1, 2, 1);
        assert_eq!(c, vec![11.0]);
    }
}
