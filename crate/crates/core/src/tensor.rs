//! Dense row-major `f64` tensors and the handful of kernels the residual
//! network needs.
//!
//! Every kernel processes batch rows independently and accumulates in a fixed
//! order, so evaluating one sample alone or inside a batch gives bitwise
//! identical results. The cached and live distillation paths rely on this.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} must be non-empty with positive sizes"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} elements, got {}",
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

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a `[rows.len() x width]` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let width = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * width);
        for row in rows {
            let row = row.as_ref();
            if row.len() != width {
                return Err(Error::Dimension(format!(
                    "ragged rows: expected width {width}, got {}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), width], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension; a 1-D tensor counts as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Elements per row.
    pub fn cols(&self) -> usize {
        self.data.len() / self.rows()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::Dimension(format!(
                    "row {i} out of range for {} rows",
                    self.rows()
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![indices.len(), c], data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub(crate) fn ensure_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// Mean squared error between two feature maps: the per-sample mean over all
/// `P` elements of a row, averaged over the batch rows.
pub fn feature_mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_same_shape(b, "feature_mse")?;
    let rows = a.rows();
    let pixels = a.cols() as f64;
    let mut total = 0.0;
    for r in 0..rows {
        let per_sample: f64 = a
            .row(r)
            .iter()
            .zip(b.row(r))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        total += per_sample / pixels;
    }
    Ok(total / rows as f64)
}

/// `y = x · Wᵀ + b` for `x: [B x in]`, `W: [out x in]`, `b: [out]`.
pub fn affine(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (out_dim, in_dim) = (weight.shape[0], weight.shape[1]);
    if x.cols() != in_dim {
        return Err(Error::Dimension(format!(
            "affine input width {} != weight input width {in_dim}",
            x.cols()
        )));
    }
    let rows = x.rows();
    let mut out = vec![0.0; rows * out_dim];
    for r in 0..rows {
        let xr = x.row(r);
        let yr = &mut out[r * out_dim..(r + 1) * out_dim];
        for (o, y) in yr.iter_mut().enumerate() {
            let wr = &weight.data[o * in_dim..(o + 1) * in_dim];
            let mut acc = 0.0;
            for (w, v) in wr.iter().zip(xr) {
                acc += w * v;
            }
            *y = acc + bias.data[o];
        }
    }
    Ok(Tensor {
        shape: vec![rows, out_dim],
        data: out,
    })
}

/// `g · W` for `g: [B x out]`, `W: [out x in]`; the input-gradient of [`affine`].
pub fn affine_input_grad(grad_out: &Tensor, weight: &Tensor) -> Tensor {
    let (out_dim, in_dim) = (weight.shape[0], weight.shape[1]);
    let rows = grad_out.rows();
    let mut out = vec![0.0; rows * in_dim];
    for r in 0..rows {
        let gr = grad_out.row(r);
        let xr = &mut out[r * in_dim..(r + 1) * in_dim];
        for (o, &g) in gr.iter().enumerate().take(out_dim) {
            if g == 0.0 {
                continue;
            }
            let wr = &weight.data[o * in_dim..(o + 1) * in_dim];
            for (x, w) in xr.iter_mut().zip(wr) {
                *x += g * w;
            }
        }
    }
    Tensor {
        shape: vec![rows, in_dim],
        data: out,
    }
}

/// Accumulates the weight and bias gradients of [`affine`]:
/// `dW += gᵀ · x`, `db += Σ_rows g`.
pub fn accumulate_affine_grads(
    grad_out: &Tensor,
    input: &Tensor,
    grad_weight: &mut Tensor,
    grad_bias: &mut Tensor,
) {
    let (out_dim, in_dim) = (grad_weight.shape[0], grad_weight.shape[1]);
    for r in 0..grad_out.rows() {
        let gr = grad_out.row(r);
        let xr = input.row(r);
        for o in 0..out_dim {
            let g = gr[o];
            grad_bias.data[o] += g;
            let wr = &mut grad_weight.data[o * in_dim..(o + 1) * in_dim];
            for (w, x) in wr.iter_mut().zip(xr) {
                *w += g * x;
            }
        }
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Index of the largest entry in each row; ties resolve to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
