//! Dense row-major f64 tensors.
//!
//! Everything in training runs at 64-bit precision; only the wire container
//! narrows latents to 32-bit. Matrix products parallelize over output rows,
//! which keeps results bitwise deterministic regardless of thread count.

use rayon::prelude::*;

use crate::error::{GgzError, Result};

/// Row-major dense tensor. Values must stay finite through every forward and
/// backward pass; `assert_finite` is the cheap spot check used at loss sinks.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Below this many multiply-adds a parallel matmul is pure overhead.
const PAR_FLOP_THRESHOLD: usize = 64 * 1024;

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(GgzError::InvalidArg(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if n != data.len() {
            return Err(GgzError::Dim(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(GgzError::InvalidArg(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Rows of a 2-D tensor (a 1-D tensor counts as a single row).
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[..self.shape.len() - 1].iter().product()
        } else {
            1
        }
    }

    /// Length of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(GgzError::Runtime(format!("non-finite values in {what}")))
        }
    }

    /// `self[m×k] · other[k×n]`, row-parallel.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = as_2d(self)?;
        let (k2, n) = as_2d(other)?;
        if k != k2 {
            return Err(GgzError::Dim(format!(
                "matmul {:?} x {:?}: inner dimensions {k} and {k2} differ",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        let a = &self.data;
        let b = &other.data;
        let body = |(row_idx, out_row): (usize, &mut [f64])| {
            let a_row = &a[row_idx * k..(row_idx + 1) * k];
            for (p, &a_val) in a_row.iter().enumerate() {
                if a_val == 0.0 {
                    continue;
                }
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &b_val) in out_row.iter_mut().zip(b_row) {
                    *o += a_val * b_val;
                }
            }
        };
        if m * n * k >= PAR_FLOP_THRESHOLD {
            out.par_chunks_mut(n).enumerate().for_each(body);
        } else {
            out.chunks_mut(n).enumerate().for_each(body);
        }
        Tensor::matrix(m, n, out)
    }

    /// `self[m×k] · otherᵀ` where other is `[n×k]`.
    pub fn matmul_bt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = as_2d(self)?;
        let (n, k2) = as_2d(other)?;
        if k != k2 {
            return Err(GgzError::Dim(format!(
                "matmul_bt {:?} x {:?}: inner dimensions {k} and {k2} differ",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        let a = &self.data;
        let b = &other.data;
        let body = |(row_idx, out_row): (usize, &mut [f64])| {
            let a_row = &a[row_idx * k..(row_idx + 1) * k];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &b[j * k..(j + 1) * k];
                *o = dot(a_row, b_row);
            }
        };
        if m * n * k >= PAR_FLOP_THRESHOLD {
            out.par_chunks_mut(n).enumerate().for_each(body);
        } else {
            out.chunks_mut(n).enumerate().for_each(body);
        }
        Tensor::matrix(m, n, out)
    }

    /// `selfᵀ · other` where self is `[m×k]`, other `[m×n]`.
    pub fn matmul_at(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = as_2d(self)?;
        let (m2, n) = as_2d(other)?;
        if m != m2 {
            return Err(GgzError::Dim(format!(
                "matmul_at {:?} x {:?}: leading dimensions {m} and {m2} differ",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; k * n];
        let a = &self.data;
        let b = &other.data;
        let body = |(i, out_row): (usize, &mut [f64])| {
            for r in 0..m {
                let a_val = a[r * k + i];
                if a_val == 0.0 {
                    continue;
                }
                let b_row = &b[r * n..(r + 1) * n];
                for (o, &b_val) in out_row.iter_mut().zip(b_row) {
                    *o += a_val * b_val;
                }
            }
        };
        if m * n * k >= PAR_FLOP_THRESHOLD {
            out.par_chunks_mut(n).enumerate().for_each(body);
        } else {
            out.chunks_mut(n).enumerate().for_each(body);
        }
        Tensor::matrix(k, n, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(GgzError::Dim(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(GgzError::Dim(format!(
                "accumulate on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

fn as_2d(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape.len() {
        1 => Ok((1, t.shape[0])),
        2 => Ok((t.shape[0], t.shape[1])),
        _ => Err(GgzError::Dim(format!(
            "expected 1-D or 2-D tensor, got shape {:?}",
            t.shape
        ))),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators so LLVM can vectorize without reassociation concerns.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let w = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        let out = a.matmul(&w).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch_names_shapes() {
        let a = Tensor::matrix(1, 3, vec![1.0; 3]).unwrap();
        let b = Tensor::matrix(2, 2, vec![1.0; 4]).unwrap();
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 4, (0..12).map(|v| v as f64).collect()).unwrap();
        let at_b = a.matmul_at(&b).unwrap();
        // explicit aᵀ
        let at = Tensor::matrix(2, 3, vec![1.0, 3.0, 5.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(at_b.data(), at.matmul(&b).unwrap().data());

        let c = Tensor::matrix(4, 2, (0..8).map(|v| v as f64).collect()).unwrap();
        let a_ct = a.matmul_bt(&c).unwrap();
        let ct = Tensor::matrix(2, 4, vec![0.0, 2.0, 4.0, 6.0, 1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(a_ct.data(), a.matmul(&ct).unwrap().data());
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }
}
