use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gru::{GruStack, GruStackCache};
use super::units::RegressionTarget;
use crate::error::{EtpError, Result};
use crate::tensor::{Linear, Module, Param, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RnConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub depth: usize,
}

impl RnConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: 512,
            depth: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.depth == 0 {
            return Err(EtpError::invalid(
                "refinement network needs positive input_dim, hidden and depth",
            ));
        }
        Ok(())
    }
}

/// Bidirectional GRU encoder over unit features with a linear `(c, s)` head.
///
/// The two directions are independent stacks; their final top-layer states
/// are concatenated `[forward, backward]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RnModel {
    pub forward: GruStack,
    pub backward: GruStack,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct RnCache {
    fwd: GruStackCache,
    bwd: GruStackCache,
    joint: Tensor,
}

impl RnModel {
    pub fn new<R: Rng + ?Sized>(cfg: &RnConfig, rng: &mut R) -> Self {
        Self {
            forward: GruStack::new("rn.fwd", cfg.input_dim, cfg.hidden, cfg.depth, rng),
            backward: GruStack::new("rn.bwd", cfg.input_dim, cfg.hidden, cfg.depth, rng),
            head: Linear::new("rn.head", 2 * cfg.hidden, 2, rng),
        }
    }

    pub fn zeros(cfg: &RnConfig) -> Self {
        Self {
            forward: GruStack::zeros("rn.fwd", cfg.input_dim, cfg.hidden, cfg.depth),
            backward: GruStack::zeros("rn.bwd", cfg.input_dim, cfg.hidden, cfg.depth),
            head: Linear::zeros("rn.head", 2 * cfg.hidden, 2),
        }
    }

    pub fn config(&self) -> RnConfig {
        RnConfig {
            input_dim: self.forward.layers[0].input_size(),
            hidden: self.forward.hidden_size(),
            depth: self.forward.layers.len(),
        }
    }

    /// Batched forward: `seq[t]` holds unit `t` of every sample (`[N, D]`).
    /// Returns `[N, 2]` predictions.
    pub fn forward_batch(&self, seq: &[Tensor]) -> Result<(Tensor, RnCache)> {
        if seq.is_empty() {
            return Err(EtpError::invalid("refinement needs at least one unit"));
        }
        let (h_f, fwd) = self.forward.forward(seq)?;
        let reversed: Vec<Tensor> = seq.iter().rev().cloned().collect();
        let (h_b, bwd) = self.backward.forward(&reversed)?;
        let joint = h_f.concat_cols(&h_b)?;
        let out = self.head.forward(&joint)?;
        Ok((out, RnCache { fwd, bwd, joint }))
    }

    /// Accumulates parameter gradients for an upstream `[N, 2]` gradient and
    /// returns per-unit input gradients.
    pub fn backward_batch(&mut self, cache: &RnCache, d_out: &Tensor) -> Result<Vec<Tensor>> {
        let d_joint = self.head.backward(&cache.joint, d_out)?;
        let (d_f, d_b) = d_joint.split_cols(self.forward.hidden_size())?;
        let mut d_seq = self.forward.backward(&cache.fwd, &d_f)?;
        let d_rev = self.backward.backward(&cache.bwd, &d_b)?;
        for (d, r) in d_seq.iter_mut().zip(d_rev.iter().rev()) {
            d.add_scaled(r, 1.0)?;
        }
        Ok(d_seq)
    }

    /// Predicts offsets for one proposal from its `L x D` unit matrix.
    pub fn predict(&self, units: &Tensor) -> Result<RegressionTarget> {
        let seq = sequence_of(std::slice::from_ref(units))?;
        let (out, _) = self.forward_batch(&seq)?;
        Ok(RegressionTarget::new(out.data()[0], out.data()[1]))
    }
}

/// Transposes equal-length `L x D` unit matrices into `L` batched steps.
pub fn sequence_of(samples: &[Tensor]) -> Result<Vec<Tensor>> {
    let first = samples.first().ok_or_else(|| EtpError::invalid("empty batch"))?;
    let (len, dim) = (first.rows(), first.cols());
    if let Some(bad) = samples.iter().find(|s| s.rows() != len || s.cols() != dim) {
        return Err(EtpError::Shape {
            op: "unit sequence batch",
            left: first.shape().to_vec(),
            right: bad.shape().to_vec(),
        });
    }
    (0..len)
        .map(|t| {
            let data = samples.iter().flat_map(|s| s.row(t).iter().copied()).collect();
            Tensor::matrix(samples.len(), dim, data)
        })
        .collect()
}

impl Module for RnModel {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.forward.params();
        p.extend(self.backward.params());
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.forward.params_mut();
        p.extend(self.backward.params_mut());
        p.extend(self.head.params_mut());
        p
    }
}
