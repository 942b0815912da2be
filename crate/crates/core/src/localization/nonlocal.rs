//! Residual dot-product self-attention over a unit sequence.
//!
//! `y_i = (1/N) Σ_j (θ(x_i) · φ(x_j)) g(x_j)`, output `x + out(y)`.

use rand::Rng;

use crate::error::{EtpError, Result};
use crate::tensor::{Linear, Module, Param, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct NonLocalBlock {
    pub theta: Linear,
    pub phi: Linear,
    pub g: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct NonLocalCache {
    x: Tensor,
    th: Tensor,
    ph: Tensor,
    gx: Tensor,
    attn: Tensor,
    y: Tensor,
}

impl NonLocalBlock {
    /// Random embeddings with bottleneck `inner`; `out` starts at zero so the
    /// block is an exact identity until trained.
    pub fn new<R: Rng + ?Sized>(prefix: &str, dim: usize, inner: usize, rng: &mut R) -> Self {
        Self {
            theta: Linear::new(&format!("{prefix}.theta"), dim, inner, rng),
            phi: Linear::new(&format!("{prefix}.phi"), dim, inner, rng),
            g: Linear::new(&format!("{prefix}.g"), dim, inner, rng),
            out: Linear::zeros(&format!("{prefix}.out"), inner, dim),
        }
    }

    pub fn zeros(prefix: &str, dim: usize, inner: usize) -> Self {
        Self {
            theta: Linear::zeros(&format!("{prefix}.theta"), dim, inner),
            phi: Linear::zeros(&format!("{prefix}.phi"), dim, inner),
            g: Linear::zeros(&format!("{prefix}.g"), dim, inner),
            out: Linear::zeros(&format!("{prefix}.out"), inner, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.d_in()
    }

    /// `x: [N, D]` to `[N, D]`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, NonLocalCache)> {
        let n = x.rows().max(1) as f64;
        let th = self.theta.forward(x)?;
        let ph = self.phi.forward(x)?;
        let gx = self.g.forward(x)?;
        let attn = th.matmul_nt(&ph)?.scale(1.0 / n);
        let y = order_free_product(&attn, &gx)?;
        let mut z = self.out.forward(&y)?;
        z.add_scaled(x, 1.0)?;
        let cache = NonLocalCache {
            x: x.clone(),
            th,
            ph,
            gx,
            attn,
            y,
        };
        Ok((z, cache))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &NonLocalCache, dz: &Tensor) -> Result<Tensor> {
        let NonLocalCache { x, th, ph, gx, attn, y } = cache;
        let inv_n = 1.0 / x.rows().max(1) as f64;
        let dy = self.out.backward(y, dz)?;
        let d_attn = dy.matmul_nt(gx)?.scale(inv_n);
        let dgx = attn.matmul_tn(&dy)?;
        let dth = d_attn.matmul(ph)?;
        let dph = d_attn.matmul_tn(th)?;
        let mut dx = dz.clone();
        dx.add_scaled(&self.theta.backward(x, &dth)?, 1.0)?;
        dx.add_scaled(&self.phi.backward(x, &dph)?, 1.0)?;
        dx.add_scaled(&self.g.backward(x, &dgx)?, 1.0)?;
        Ok(dx)
    }
}

/// `a · b` where each output element sums its terms in sorted order, so the
/// result does not depend on the order of the summed positions.
fn order_free_product(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return Err(EtpError::Shape {
            op: "attention",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (n, m) = (a.rows(), b.cols());
    let mut out = Vec::with_capacity(n * m);
    let mut terms = Vec::with_capacity(a.cols());
    for i in 0..n {
        for k in 0..m {
            terms.clear();
            terms.extend(a.row(i).iter().enumerate().map(|(j, w)| w * b.row(j)[k]));
            terms.sort_unstable_by(f64::total_cmp);
            out.push(terms.iter().sum());
        }
    }
    Tensor::matrix(n, m, out)
}

impl Module for NonLocalBlock {
    fn params(&self) -> Vec<&Param> {
        [&self.theta, &self.phi, &self.g, &self.out]
            .into_iter()
            .flat_map(|l| l.params())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        [&mut self.theta, &mut self.phi, &mut self.g, &mut self.out]
            .into_iter()
            .flat_map(|l| l.params_mut())
            .collect()
    }
}
