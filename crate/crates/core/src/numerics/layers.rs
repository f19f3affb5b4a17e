//! Manual-gradient building blocks: affine layer, ReLU, L2 normalization, softmax.

use serde::{Deserialize, Serialize};

use super::matrix::{dot, norm, DenseMatrix};
use super::rng::Rng;
use crate::error::{PcsrError, Result};

/// Norms below this are rejected by [`l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

/// Affine map `y = W x + b` with gradient buffers of matching shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub grad_weight: DenseMatrix,
    pub grad_bias: Vec<f64>,
}

impl LinearLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearLayer {
            weight: DenseMatrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
            grad_weight: DenseMatrix::zeros(out_dim, in_dim),
            grad_bias: vec![0.0; out_dim],
        }
    }

    /// Uniform Glorot initialization, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let mut layer = LinearLayer::zeros(in_dim, out_dim);
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        for w in layer.weight.as_mut_slice() {
            *w = rng.uniform(-limit, limit);
        }
        layer
    }

    pub fn from_parts(weight: DenseMatrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(PcsrError::config(format!(
                "bias length {} does not match weight rows {}",
                bias.len(),
                weight.rows()
            )));
        }
        let (rows, cols) = weight.shape();
        Ok(LinearLayer {
            grad_weight: DenseMatrix::zeros(rows, cols),
            grad_bias: vec![0.0; rows],
            weight,
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(PcsrError::config(format!(
                "linear layer expects input of length {}, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        Ok((0..self.out_dim())
            .map(|o| dot(self.weight.row(o), x) + self.bias[o])
            .collect())
    }

    /// Accumulates `grad_weight += upstream ⊗ x`, `grad_bias += upstream`; returns `Wᵀ upstream`.
    pub fn backward(&mut self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() || upstream.len() != self.out_dim() {
            return Err(PcsrError::config(format!(
                "linear backward expects x of length {} and upstream of length {}, got {} and {}",
                self.in_dim(),
                self.out_dim(),
                x.len(),
                upstream.len()
            )));
        }
        let mut input_grad = vec![0.0; self.in_dim()];
        for (o, &u) in upstream.iter().enumerate() {
            self.grad_bias[o] += u;
            let gw = self.grad_weight.row_mut(o);
            for (g, &xv) in gw.iter_mut().zip(x) {
                *g += u * xv;
            }
            for (ig, &w) in input_grad.iter_mut().zip(self.weight.row(o)) {
                *ig += w * u;
            }
        }
        Ok(input_grad)
    }

    /// Row-wise forward over a batch `x` of shape `B × in`.
    pub fn forward_batch(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.in_dim() {
            return Err(PcsrError::config(format!(
                "linear layer expects {} input columns, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        let mut out = x.matmul_transposed(&self.weight)?;
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Batch backward; accumulates parameter gradients and returns `B × in` input gradients.
    pub fn backward_batch(&mut self, x: &DenseMatrix, upstream: &DenseMatrix) -> Result<DenseMatrix> {
        self.accumulate_grads(x, upstream)?;
        self.input_grad_batch(upstream)
    }

    /// Input gradient only; parameter gradients are left untouched.
    pub fn input_grad_batch(&self, upstream: &DenseMatrix) -> Result<DenseMatrix> {
        if upstream.cols() != self.out_dim() {
            return Err(PcsrError::config("linear backward: upstream width mismatch"));
        }
        upstream.matmul(&self.weight)
    }

    fn accumulate_grads(&mut self, x: &DenseMatrix, upstream: &DenseMatrix) -> Result<()> {
        if x.rows() != upstream.rows()
            || x.cols() != self.in_dim()
            || upstream.cols() != self.out_dim()
        {
            return Err(PcsrError::config(format!(
                "linear backward: x {}x{}, upstream {}x{}, layer {}->{}",
                x.rows(),
                x.cols(),
                upstream.rows(),
                upstream.cols(),
                self.in_dim(),
                self.out_dim()
            )));
        }
        let gw = upstream.transposed_matmul(x)?;
        self.grad_weight.add_assign(&gw)?;
        for r in 0..upstream.rows() {
            for (g, u) in self.grad_bias.iter_mut().zip(upstream.row(r)) {
                *g += u;
            }
        }
        Ok(())
    }
}

pub fn relu(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Gradient through ReLU given the pre-activation.
pub fn relu_backward(pre_activation: &DenseMatrix, upstream: &DenseMatrix) -> DenseMatrix {
    let mut out = upstream.clone();
    for (g, &z) in out.as_mut_slice().iter_mut().zip(pre_activation.as_slice()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

pub fn l2_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if !(n >= MIN_NORM) {
        return Err(PcsrError::Degenerate(format!(
            "cannot normalize vector with norm {n:e}"
        )));
    }
    Ok(x.iter().map(|v| v / n).collect())
}

/// Applies the Jacobian of `x ↦ x/‖x‖` at `x` (with `y = x/‖x‖`) to `upstream`.
pub fn l2_normalize_backward(x: &[f64], y: &[f64], upstream: &[f64]) -> Vec<f64> {
    let n = norm(x);
    let proj = dot(y, upstream);
    upstream
        .iter()
        .zip(y)
        .map(|(g, yv)| (g - yv * proj) / n)
        .collect()
}

pub fn l2_normalize_rows(x: &DenseMatrix) -> Result<DenseMatrix> {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let normalized = l2_normalize(x.row(r))?;
        out.row_mut(r).copy_from_slice(&normalized);
    }
    Ok(out)
}

pub fn l2_normalize_rows_backward(
    x: &DenseMatrix,
    y: &DenseMatrix,
    upstream: &DenseMatrix,
) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let g = l2_normalize_backward(x.row(r), y.row(r), upstream.row(r));
        out.row_mut(r).copy_from_slice(&g);
    }
    out
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Pulls a gradient w.r.t. softmax probabilities back to the logits.
pub fn softmax_backward(probs: &[f64], upstream: &[f64]) -> Vec<f64> {
    let inner = dot(probs, upstream);
    probs
        .iter()
        .zip(upstream)
        .map(|(p, g)| p * (g - inner))
        .collect()
}

/// Pulls a gradient w.r.t. log-softmax outputs back to the logits.
pub fn log_softmax_backward(probs: &[f64], upstream: &[f64]) -> Vec<f64> {
    let total: f64 = upstream.iter().sum();
    upstream
        .iter()
        .zip(probs)
        .map(|(g, p)| g - p * total)
        .collect()
}

pub fn softmax_rows(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = logits.clone();
    for r in 0..logits.rows() {
        let p = softmax(logits.row(r));
        out.row_mut(r).copy_from_slice(&p);
    }
    out
}

pub fn softmax_rows_backward(probs: &DenseMatrix, upstream: &DenseMatrix) -> DenseMatrix {
    let mut out = upstream.clone();
    for r in 0..probs.rows() {
        let g = softmax_backward(probs.row(r), upstream.row(r));
        out.row_mut(r).copy_from_slice(&g);
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
