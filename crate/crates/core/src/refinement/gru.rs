//! Gated recurrent unit with explicit backpropagation through time.
//!
//! ```text
//! r  = σ(x W_r + h U_r + b_r)
//! z  = σ(x W_z + h U_z + b_z)
//! ĥ  = tanh(x W + (r ⊙ h) U + b)
//! h' = z ⊙ h + (1 - z) ⊙ ĥ
//! ```
//!
//! The update gate weights the previous state.

use rand::Rng;

use crate::error::Result;
use crate::tensor::ops::{sigmoid, sigmoid_backward, tanh, tanh_backward};
use crate::tensor::{Module, Param, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub w_r: Param,
    pub u_r: Param,
    pub b_r: Param,
    pub w_z: Param,
    pub u_z: Param,
    pub b_z: Param,
    pub w_h: Param,
    pub u_h: Param,
    pub b_h: Param,
}

/// Forward state kept for the backward pass of one step.
#[derive(Debug, Clone)]
pub struct GruStepCache {
    x: Tensor,
    h_prev: Tensor,
    r: Tensor,
    z: Tensor,
    h_hat: Tensor,
    rh: Tensor,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let w =
            |name: &str, rng: &mut R| Param::scaled_uniform(format!("{prefix}.{name}"), &[input, hidden], input, rng);
        let u =
            |name: &str, rng: &mut R| Param::scaled_uniform(format!("{prefix}.{name}"), &[hidden, hidden], hidden, rng);
        let b = |name: &str| Param::zeros(format!("{prefix}.{name}"), &[hidden]);
        Self {
            w_r: w("w_r", rng),
            u_r: u("u_r", rng),
            b_r: b("b_r"),
            w_z: w("w_z", rng),
            u_z: u("u_z", rng),
            b_z: b("b_z"),
            w_h: w("w_h", rng),
            u_h: u("u_h", rng),
            b_h: b("b_h"),
        }
    }

    pub fn zeros(prefix: &str, input: usize, hidden: usize) -> Self {
        let p = |name: &str, shape: &[usize]| Param::zeros(format!("{prefix}.{name}"), shape);
        Self {
            w_r: p("w_r", &[input, hidden]),
            u_r: p("u_r", &[hidden, hidden]),
            b_r: p("b_r", &[hidden]),
            w_z: p("w_z", &[input, hidden]),
            u_z: p("u_z", &[hidden, hidden]),
            b_z: p("b_z", &[hidden]),
            w_h: p("w_h", &[input, hidden]),
            u_h: p("u_h", &[hidden, hidden]),
            b_h: p("b_h", &[hidden]),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_r.value.shape()[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.u_r.value.shape()[0]
    }

    fn gate_input(x: &Tensor, w: &Param, h: &Tensor, u: &Param, b: &Param) -> Result<Tensor> {
        let mut a = x.matmul(&w.value)?;
        a.add_scaled(&h.matmul(&u.value)?, 1.0)?;
        a.add_row_broadcast(&b.value)
    }

    /// One step on a batch: `x: [N, D]`, `h_prev: [N, H]`.
    pub fn step(&self, x: &Tensor, h_prev: &Tensor) -> Result<(Tensor, GruStepCache)> {
        let r = sigmoid(&Self::gate_input(x, &self.w_r, h_prev, &self.u_r, &self.b_r)?);
        let z = sigmoid(&Self::gate_input(x, &self.w_z, h_prev, &self.u_z, &self.b_z)?);
        let rh = r.zip_map(h_prev, |a, b| a * b)?;
        let h_hat = tanh(&Self::gate_input(x, &self.w_h, &rh, &self.u_h, &self.b_h)?);
        let mut h = z.zip_map(h_prev, |z, h| z * h)?;
        h.add_scaled(&z.zip_map(&h_hat, |z, c| (1.0 - z) * c)?, 1.0)?;
        let cache = GruStepCache {
            x: x.clone(),
            h_prev: h_prev.clone(),
            r,
            z,
            h_hat,
            rh,
        };
        Ok((h, cache))
    }

    /// Accumulates parameter gradients and returns `(dx, dh_prev)`.
    pub fn step_backward(&mut self, cache: &GruStepCache, dh: &Tensor) -> Result<(Tensor, Tensor)> {
        let GruStepCache {
            x,
            h_prev,
            r,
            z,
            h_hat,
            rh,
        } = cache;

        let mut dh_prev = dh.zip_map(z, |g, z| g * z)?;
        let dz = dh
            .zip_map(h_prev, |g, h| g * h)?
            .zip_map(&dh.zip_map(h_hat, |g, c| g * c)?, |a, b| a - b)?;
        let dh_hat = dh.zip_map(z, |g, z| g * (1.0 - z))?;

        // candidate
        let da_h = tanh_backward(h_hat, &dh_hat)?;
        self.w_h.grad.add_scaled(&x.matmul_tn(&da_h)?, 1.0)?;
        self.u_h.grad.add_scaled(&rh.matmul_tn(&da_h)?, 1.0)?;
        self.b_h.grad.add_scaled(&da_h.sum_rows(), 1.0)?;
        let mut dx = da_h.matmul_nt(&self.w_h.value)?;
        let drh = da_h.matmul_nt(&self.u_h.value)?;
        let dr = drh.zip_map(h_prev, |g, h| g * h)?;
        dh_prev.add_scaled(&drh.zip_map(r, |g, r| g * r)?, 1.0)?;

        // update gate
        let da_z = sigmoid_backward(z, &dz)?;
        self.w_z.grad.add_scaled(&x.matmul_tn(&da_z)?, 1.0)?;
        self.u_z.grad.add_scaled(&h_prev.matmul_tn(&da_z)?, 1.0)?;
        self.b_z.grad.add_scaled(&da_z.sum_rows(), 1.0)?;
        dx.add_scaled(&da_z.matmul_nt(&self.w_z.value)?, 1.0)?;
        dh_prev.add_scaled(&da_z.matmul_nt(&self.u_z.value)?, 1.0)?;

        // reset gate
        let da_r = sigmoid_backward(r, &dr)?;
        self.w_r.grad.add_scaled(&x.matmul_tn(&da_r)?, 1.0)?;
        self.u_r.grad.add_scaled(&h_prev.matmul_tn(&da_r)?, 1.0)?;
        self.b_r.grad.add_scaled(&da_r.sum_rows(), 1.0)?;
        dx.add_scaled(&da_r.matmul_nt(&self.w_r.value)?, 1.0)?;
        dh_prev.add_scaled(&da_r.matmul_nt(&self.u_r.value)?, 1.0)?;

        Ok((dx, dh_prev))
    }

    /// Gate activations of the last forward step, for inspection in tests.
    pub fn gates(cache: &GruStepCache) -> (&Tensor, &Tensor, &Tensor) {
        (&cache.r, &cache.z, &cache.h_hat)
    }
}

impl Module for GruCell {
    fn params(&self) -> Vec<&Param> {
        vec![
            &self.w_r, &self.u_r, &self.b_r, &self.w_z, &self.u_z, &self.b_z, &self.w_h, &self.u_h, &self.b_h,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_h,
            &mut self.u_h,
            &mut self.b_h,
        ]
    }
}

/// Stacked GRU layers run over a sequence in one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct GruStack {
    pub layers: Vec<GruCell>,
}

#[derive(Debug, Clone)]
pub struct GruStackCache {
    steps: Vec<Vec<GruStepCache>>,
}

impl GruStack {
    pub fn new<R: Rng + ?Sized>(prefix: &str, input: usize, hidden: usize, depth: usize, rng: &mut R) -> Self {
        let layers = (0..depth)
            .map(|l| {
                let d_in = if l == 0 { input } else { hidden };
                GruCell::new(&format!("{prefix}.{l}"), d_in, hidden, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(prefix: &str, input: usize, hidden: usize, depth: usize) -> Self {
        let layers = (0..depth)
            .map(|l| {
                let d_in = if l == 0 { input } else { hidden };
                GruCell::zeros(&format!("{prefix}.{l}"), d_in, hidden)
            })
            .collect();
        Self { layers }
    }

    pub fn hidden_size(&self) -> usize {
        self.layers[0].hidden_size()
    }

    /// Runs the sequence (each element `[N, D]`) from a zero state and returns
    /// the top layer's final hidden state.
    pub fn forward(&self, seq: &[Tensor]) -> Result<(Tensor, GruStackCache)> {
        let n = seq.first().map_or(1, Tensor::rows);
        let hidden = self.hidden_size();
        let mut inputs: Vec<Tensor> = seq.to_vec();
        let mut steps = Vec::with_capacity(self.layers.len());
        let mut last = Tensor::zeros(&[n, hidden]);
        for cell in &self.layers {
            let mut h = Tensor::zeros(&[n, hidden]);
            let mut caches = Vec::with_capacity(inputs.len());
            let mut outputs = Vec::with_capacity(inputs.len());
            for x in &inputs {
                let (h_next, cache) = cell.step(x, &h)?;
                caches.push(cache);
                outputs.push(h_next.clone());
                h = h_next;
            }
            steps.push(caches);
            last = h;
            inputs = outputs;
        }
        Ok((last, GruStackCache { steps }))
    }

    /// Backpropagates a gradient on the final top-layer state and returns
    /// gradients for each sequence element.
    pub fn backward(&mut self, cache: &GruStackCache, d_final: &Tensor) -> Result<Vec<Tensor>> {
        let len = cache.steps.first().map_or(0, Vec::len);
        let mut d_outputs: Vec<Option<Tensor>> = vec![None; len];
        if len > 0 {
            d_outputs[len - 1] = Some(d_final.clone());
        }
        for (cell, steps) in self.layers.iter_mut().zip(&cache.steps).rev() {
            let mut d_inputs = vec![None; len];
            let mut dh_next: Option<Tensor> = None;
            for t in (0..len).rev() {
                let mut dh = match (&dh_next, &d_outputs[t]) {
                    (Some(a), Some(b)) => {
                        let mut s = a.clone();
                        s.add_scaled(b, 1.0)?;
                        s
                    }
                    (Some(a), None) => a.clone(),
                    (None, Some(b)) => b.clone(),
                    (None, None) => continue,
                };
                if dh.shape().is_empty() {
                    dh = Tensor::zeros(d_final.shape());
                }
                let (dx, dh_prev) = cell.step_backward(&steps[t], &dh)?;
                d_inputs[t] = Some(dx);
                dh_next = Some(dh_prev);
            }
            d_outputs = d_inputs;
        }
        Ok(d_outputs
            .into_iter()
            .enumerate()
            .map(|(t, d)| {
                d.unwrap_or_else(|| {
                    let x = &cache.steps[0][t].x;
                    Tensor::zeros(x.shape())
                })
            })
            .collect())
    }
}

impl Module for GruStack {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}
