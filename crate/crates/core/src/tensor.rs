//! Dense row-major f32 tensors.
//!
//! Everything in this crate runs on this one type: owned, contiguous,
//! row-major `Vec<f32>` storage with a runtime shape. Construction validates
//! that every element is finite; ops that build new tensors preserve that
//! invariant, so non-finite values are caught at the boundary where they
//! enter rather than deep inside a forward pass.

use crate::error::{Error, Result};
use rayon::prelude::*;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor from explicit data, checking length and finiteness.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {numel} elements, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite element {bad}")));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the backing storage; the shape stays fixed.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Reinterprets the same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {shape:?} ({numel})",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn at2(&self, i: usize, j: usize) -> f32 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn at3(&self, i: usize, j: usize, k: usize) -> f32 {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        debug_assert_eq!(self.shape.len(), 2);
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f32] {
        debug_assert_eq!(self.shape.len(), 2);
        let w = self.shape[1];
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32 + Sync) -> Tensor {
        let data = if self.data.len() > 1 << 16 {
            self.data.par_iter().map(|&v| f(v)).collect()
        } else {
            self.data.iter().map(|&v| f(v)).collect()
        };
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Euclidean norm, accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul lhs")?;
        let (k2, n) = dims2(other, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul: [{m},{k}] x [{k2},{n}]")));
        }
        // Row-major rhs walks its columns with stride n; transpose once so the
        // inner loops are contiguous dot products.
        let bt = transpose2(other);
        let mut out = vec![0.0f32; m * n];
        let work = m * n * k;
        if work > 1 << 18 {
            out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                let a = &self.data[i * k..(i + 1) * k];
                for (j, o) in row.iter_mut().enumerate() {
                    *o = dot(a, &bt[j * k..(j + 1) * k]);
                }
            });
        } else {
            for i in 0..m {
                let a = &self.data[i * k..(i + 1) * k];
                for j in 0..n {
                    out[i * n + j] = dot(a, &bt[j * k..(j + 1) * k]);
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `[m,k] x [n,k]^T -> [m,n]`; avoids the transpose when the rhs is
    /// already stored row-per-output (the layout of every weight matrix here).
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul_nt lhs")?;
        let (n, k2) = dims2(other, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul_nt: [{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![0.0f32; m * n];
        let work = m * n * k;
        if work > 1 << 18 {
            out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                let a = &self.data[i * k..(i + 1) * k];
                for (j, o) in row.iter_mut().enumerate() {
                    *o = dot(a, &other.data[j * k..(j + 1) * k]);
                }
            });
        } else {
            for i in 0..m {
                let a = &self.data[i * k..(i + 1) * k];
                for j in 0..n {
                    out[i * n + j] = dot(a, &other.data[j * k..(j + 1) * k]);
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (m, n) = dims2(self, "transpose")?;
        Ok(Tensor {
            shape: vec![n, m],
            data: transpose2(self),
        })
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape[..] {
        [m, n] => Ok((m, n)),
        _ => Err(Error::shape(format!("{what}: expected rank 2, got {:?}", t.shape))),
    }
}

fn transpose2(t: &Tensor) -> Vec<f32> {
    let (m, n) = (t.shape[0], t.shape[1]);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = t.data[i * n + j];
        }
    }
    out
}

/// Contiguous dot product with eight parallel accumulators so the optimizer
/// can keep the loop in SIMD registers.
#[inline]
pub(crate) fn dot(x: &[f32], y: &[f32]) -> f32 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f32; 8];
    let chunks = x.len() / 8;
    for c in 0..chunks {
        let xs = &x[c * 8..c * 8 + 8];
        let ys = &y[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for i in chunks * 8..x.len() {
        s += x[i] * y[i];
    }
    s
}
