//! Differentiable building blocks. Each forward has a matching backward that
//! maps an upstream gradient to the input gradient.

use rand::Rng;

use super::{Module, Param, Tensor};
use crate::error::{EtpError, Result};

/// Affine map `y = x W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(prefix: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::scaled_uniform(format!("{prefix}.weight"), &[d_in, d_out], d_in, rng),
            bias: Param::zeros(format!("{prefix}.bias"), &[d_out]),
        }
    }

    pub fn zeros(prefix: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Param::zeros(format!("{prefix}.weight"), &[d_in, d_out]),
            bias: Param::zeros(format!("{prefix}.bias"), &[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear_forward(x, &self.weight, &self.bias)
    }

    /// Accumulates `dW += xᵀ dy`, `db += Σ_rows dy` and returns `dy Wᵀ`.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let dw = x.matmul_tn(dy)?;
        self.weight.grad.add_scaled(&dw, 1.0)?;
        self.bias.grad.add_scaled(&dy.sum_rows(), 1.0)?;
        dy.matmul_nt(&self.weight.value)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// `x W + b` for `x: [N, D_in]`.
pub fn linear_forward(x: &Tensor, weight: &Param, bias: &Param) -> Result<Tensor> {
    let w = &weight.value;
    if x.shape().len() != 2 || w.shape().len() != 2 || x.cols() != w.shape()[0] {
        return Err(EtpError::Shape {
            op: "linear",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    if bias.value.len() != w.shape()[1] {
        return Err(EtpError::Shape {
            op: "linear bias",
            left: w.shape().to_vec(),
            right: bias.value.shape().to_vec(),
        });
    }
    x.matmul(w)?.add_row_broadcast(&bias.value)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Gradient through `y = sigmoid(x)` given the forward output.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    y.zip_map(dy, |y, g| g * y * (1.0 - y))
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

pub fn tanh_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    y.zip_map(dy, |y, g| g * (1.0 - y * y))
}

/// Row-wise softmax with max subtraction.
pub fn softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let mut dx = y.zip_map(dy, |a, b| a * b)?;
    for i in 0..y.rows() {
        let dot: f64 = dx.row(i).iter().sum();
        let yr = y.row(i).to_vec();
        for (d, yv) in dx.row_mut(i).iter_mut().zip(yr) {
            *d -= yv * dot;
        }
    }
    Ok(dx)
}

/// Huber-style loss with the transition at |x| = 1.
pub fn smooth_l1_scalar(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad_scalar(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

pub fn smooth_l1(x: &Tensor) -> Tensor {
    x.map(smooth_l1_scalar)
}

pub fn smooth_l1_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x.zip_map(dy, |x, g| g * smooth_l1_grad_scalar(x))
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits`. Returns the loss and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let n = logits.rows();
    let c = logits.cols();
    if labels.len() != n {
        return Err(EtpError::invalid(format!(
            "{} labels for {n} rows of logits",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(EtpError::invalid(format!("label {bad} outside {c} classes")));
    }
    if n == 0 {
        return Ok((0.0, logits.clone()));
    }
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        grad.row_mut(i)[label] -= 1.0;
    }
    let inv = 1.0 / n as f64;
    Ok((loss * inv, grad.scale(inv)))
}

/// Mean of `max(0, 1 - c_i p_i)` and its gradient with respect to `p`.
pub fn hinge(preds: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if preds.len() != labels.len() {
        return Err(EtpError::invalid(format!(
            "{} hinge labels for {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    let n = preds.len();
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let grad = preds
        .iter()
        .zip(labels)
        .map(|(&p, &c)| {
            let margin = 1.0 - c * p;
            if margin > 0.0 {
                loss += margin;
                -c * inv
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss * inv, grad))
}

/// Mean of rows `[lo, hi)`; zeros when the range is empty.
pub fn mean_rows(x: &Tensor, lo: usize, hi: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.cols()];
    if hi <= lo {
        return out;
    }
    for i in lo..hi {
        for (o, v) in out.iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    let inv = 1.0 / (hi - lo) as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

/// Scatters the gradient of [`mean_rows`] back into `dx`.
pub fn mean_rows_backward(dx: &mut Tensor, lo: usize, hi: usize, dy: &[f64]) {
    if hi <= lo {
        return;
    }
    let inv = 1.0 / (hi - lo) as f64;
    for i in lo..hi {
        for (d, g) in dx.row_mut(i).iter_mut().zip(dy) {
            *d += g * inv;
        }
    }
}
