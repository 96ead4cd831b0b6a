//! Dense row-major f32 tensors and the handful of kernels GPT-2 inference needs.
//!
//! Tensors are plain contiguous buffers with a shape; there are no strided views.
//! Kernels treat a tensor of shape `[.., n]` as a stack of rows of length `n`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer-norm epsilon used throughout GPT-2.
pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "Tensor::from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[rows, cols]`.
    pub fn rows(&self) -> usize {
        match self.cols() {
            0 => 0,
            c => self.data.len() / c,
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Contiguous sub-tensor at `index` along the leading axis.
    pub fn slab(&self, index: usize) -> &[f32] {
        let inner: usize = self.shape[1..].iter().product();
        &self.data[index * inner..(index + 1) * inner]
    }

    pub fn slab_mut(&mut self, index: usize) -> &mut [f32] {
        let inner: usize = self.shape[1..].iter().product();
        &mut self.data[index * inner..(index + 1) * inner]
    }

    /// Copies the slab at `index` along the leading axis into its own tensor.
    pub fn index(&self, index: usize) -> Tensor {
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.slab(index).to_vec(),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out[m, n] += a[m, k] · b[k, n]` on raw row-major buffers.
pub(crate) fn matmul_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m, n] = a[m, k] · b[n, k]ᵀ`; every entry is a contiguous dot product.
pub(crate) fn matmul_bt_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    // eight independent accumulators let the compiler vectorize the reduction
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    acc.iter().sum::<f32>() + tail
}

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Matrix product of `a[m, k]` and `b[k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "matmul")?;
    let (k2, n) = as_matrix(b, "matmul")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    matmul_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `a[m, k] · b[n, k]ᵀ` without materializing the transpose.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "matmul_transposed")?;
    let (n, k2) = as_matrix(b, "matmul_transposed")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul_transposed",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    matmul_bt_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

pub(crate) fn softmax_in_place(row: &mut [f32], valid: usize) {
    let max = row[..valid].iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in &mut row[..valid] {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in &mut row[..valid] {
        *v /= sum;
    }
    for v in &mut row[valid..] {
        *v = 0.0;
    }
}

/// Row-wise softmax over the trailing dimension.
///
/// With `causal`, the tensor is read as a stack of `[q, k]` score matrices and
/// entry `(r, c)` with `c > r` is masked out before normalization (probability
/// exactly 0).
pub fn softmax_rows(a: &Tensor, causal: bool) -> Result<Tensor> {
    let n = a.cols();
    if a.shape().is_empty() || n == 0 {
        return Err(Error::Dimension {
            op: "softmax_rows",
            lhs: a.shape().to_vec(),
            rhs: vec![],
        });
    }
    let q = if a.shape().len() >= 2 {
        a.shape()[a.shape().len() - 2]
    } else {
        1
    };
    let mut out = a.clone();
    for r in 0..out.rows() {
        let valid = if causal { ((r % q) + 1).min(n) } else { n };
        softmax_in_place(out.row_mut(r), valid);
    }
    Ok(out)
}

pub(crate) fn layer_norm_row(x: &[f32], gain: &[f32], bias: &[f32], eps: f32, out: &mut [f32]) {
    let d = x.len() as f32;
    let mean = x.iter().sum::<f32>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
    let inv = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
    }
}

/// Layer normalization over the trailing dimension (biased variance, like GPT-2).
pub fn layer_norm(a: &Tensor, gain: &[f32], bias: &[f32], eps: f32) -> Result<Tensor> {
    let d = a.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::Dimension {
            op: "layer_norm",
            lhs: a.shape().to_vec(),
            rhs: vec![gain.len(), bias.len()],
        });
    }
    let mut out = Tensor::zeros(a.shape());
    for r in 0..a.rows() {
        layer_norm_row(a.row(r), gain, bias, eps, out.row_mut(r));
    }
    Ok(out)
}

/// GELU variant. GPT-2 was trained with the tanh approximation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gelu {
    #[default]
    Tanh,
    Erf,
}

impl Gelu {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Gelu::Tanh => {
                const C: f32 = 0.797_884_6; // sqrt(2/pi)
                0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
            }
            Gelu::Erf => 0.5 * x * (1.0 + libm::erff(x / std::f32::consts::SQRT_2)),
        }
    }
}

pub fn gelu(a: &Tensor, kind: Gelu) -> Tensor {
    let mut out = a.clone();
    out.data_mut().iter_mut().for_each(|v| *v = kind.apply(*v));
    out
}

/// Gathers rows of a `[V, d]` table.
pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (v, d) = as_matrix(table, "gather_rows")?;
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::Coordinate(format!("row {id} of a {v}-row table")));
        }
        data.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), d], data)
}

/// Index of the largest value (first one on ties). `None` for an empty slice.
pub fn argmax(xs: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in xs.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}
