//! Dense row-major `f64` tensors and the numeric kernels the tape is built on.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::BadShape {
                dims,
                len: data.len(),
            });
        }
        Ok(Tensor { dims, data })
    }

    /// Rank-0 tensor.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            dims: Vec::new(),
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimMismatch {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn full(dims: &[usize], v: f64) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![v; dims.iter().product()],
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn matrix_dims(&self) -> Option<(usize, usize)> {
        match self.dims.as_slice() {
            &[r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub fn reshaped(mut self, dims: &[usize]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::BadShape {
                dims: dims.to_vec(),
                len: self.data.len(),
            });
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise binary op; callers check dims.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.dims, other.dims);
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `op(a) · op(b)` where `op` optionally transposes. Both operands must be
    /// rank 2 with conforming inner extents.
    pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
        let mismatch = || Error::DimMismatch {
            op: "matmul",
            lhs: a.dims.clone(),
            rhs: b.dims.clone(),
        };
        let (ar, ac) = a.matrix_dims().ok_or_else(mismatch)?;
        let (br, bc) = b.matrix_dims().ok_or_else(mismatch)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        if m > 0 && n > 0 && k > 0 {
            // Row-major strides, swapped for a transposed operand.
            let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
            let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
            // SAFETY: strides and extents describe the live buffers above.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a.data.as_ptr(),
                    rsa,
                    csa,
                    b.data.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Adds a length-`cols` vector to every row of a matrix.
    pub fn add_bias_row(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (_, cols) = x.matrix_dims().ok_or_else(|| Error::DimMismatch {
            op: "add_bias_row",
            lhs: x.dims.clone(),
            rhs: bias.dims.clone(),
        })?;
        if bias.dims != [cols] {
            return Err(Error::DimMismatch {
                op: "add_bias_row",
                lhs: x.dims.clone(),
                rhs: bias.dims.clone(),
            });
        }
        let mut out = x.clone();
        for row in out.data.chunks_mut(cols.max(1)) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Column sums of a matrix, as a rank-1 tensor.
    pub fn sum_rows(x: &Tensor) -> Result<Tensor> {
        let (_, cols) = x.matrix_dims().ok_or_else(|| Error::DimMismatch {
            op: "sum_rows",
            lhs: x.dims.clone(),
            rhs: vec![],
        })?;
        let mut out = vec![0.0; cols];
        for row in x.data.chunks(cols.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(Tensor::vector(out))
    }

    /// Stacks a rank-1 tensor `rows` times.
    pub fn repeat_rows(v: &Tensor, rows: usize) -> Result<Tensor> {
        if v.dims.len() != 1 {
            return Err(Error::DimMismatch {
                op: "repeat_rows",
                lhs: v.dims.clone(),
                rhs: vec![rows],
            });
        }
        let mut data = Vec::with_capacity(rows * v.len());
        for _ in 0..rows {
            data.extend_from_slice(&v.data);
        }
        Tensor::new(vec![rows, v.len()], data)
    }

    /// Row-wise log-softmax, stabilized by subtracting the row maximum.
    pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
        let (_, cols) = x.matrix_dims().ok_or_else(|| Error::DimMismatch {
            op: "log_softmax",
            lhs: x.dims.clone(),
            rhs: vec![],
        })?;
        let mut out = x.clone();
        for row in out.data.chunks_mut(cols.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Ok(out)
    }
}
