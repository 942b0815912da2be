use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nonlocal::{NonLocalBlock, NonLocalCache};
use crate::error::{EtpError, Result};
use crate::refinement::units::{crop_units, span_mean, UnitConfig};
use crate::tensor::ops::{mean_rows, mean_rows_backward};
use crate::tensor::{Linear, Module, Param, Tensor};
use crate::timeline::TemporalInterval;

/// A proposal with the half-length context before and after it. Context
/// stages clamped away at the video edges are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StagedProposal {
    pub starting: Option<TemporalInterval>,
    pub course: TemporalInterval,
    pub ending: Option<TemporalInterval>,
}

pub fn stage_augment(p: &TemporalInterval, num_frames: usize) -> StagedProposal {
    let half = p.len() / 2;
    let lo = p.start().saturating_sub(half);
    let hi = (p.end() + half).min(num_frames);
    StagedProposal {
        starting: TemporalInterval::new(lo, p.start()).ok(),
        course: *p,
        ending: TemporalInterval::new(p.end(), hi).ok(),
    }
}

/// Unit counts of the three stages, in sequence order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StageCounts {
    pub starting: usize,
    pub course: usize,
    pub ending: usize,
}

impl StageCounts {
    pub fn total(&self) -> usize {
        self.starting + self.course + self.ending
    }

    /// Row ranges pooled into the five pyramid slots: starting, course,
    /// course first half, course second half, ending. With an odd course the
    /// middle unit belongs to both halves.
    pub fn slots(&self) -> [(usize, usize); 5] {
        let c0 = self.starting;
        let c1 = c0 + self.course;
        [
            (0, c0),
            (c0, c1),
            (c0, c0 + self.course.div_ceil(2)),
            (c0 + self.course / 2, c1),
            (c1, c1 + self.ending),
        ]
    }
}

/// The unit sequence of a staged proposal: each stage is cropped separately
/// and every unit is the mean feature over its own span.
#[derive(Debug, Clone, PartialEq)]
pub struct LnInput {
    pub interval: TemporalInterval,
    pub units: Tensor,
    pub counts: StageCounts,
}

impl LnInput {
    pub fn new(features: &Tensor, p: &TemporalInterval, units: &UnitConfig) -> Result<Self> {
        let num_frames = features.rows();
        if p.end() > num_frames {
            return Err(EtpError::invalid(format!(
                "proposal {p} exceeds video length {num_frames}"
            )));
        }
        let staged = stage_augment(p, num_frames);
        let crop = |stage: Option<TemporalInterval>| -> Vec<Vec<f64>> {
            stage.map_or_else(Vec::new, |s| {
                crop_units(&s, units.unit_len, units.stride, num_frames)
                    .iter()
                    .map(|u| span_mean(features, &u.span))
                    .collect()
            })
        };
        let starting = crop(staged.starting);
        let course = crop(Some(staged.course));
        let ending = crop(staged.ending);
        let counts = StageCounts {
            starting: starting.len(),
            course: course.len(),
            ending: ending.len(),
        };
        let rows: Vec<Vec<f64>> = starting.into_iter().chain(course).chain(ending).collect();
        Ok(Self {
            interval: *p,
            units: Tensor::from_rows(&rows)?,
            counts,
        })
    }
}

/// Concatenates the five pyramid slot means of `x` into one `5D` vector.
pub fn pyramid_pool(x: &Tensor, counts: &StageCounts) -> Vec<f64> {
    counts
        .slots()
        .iter()
        .flat_map(|&(lo, hi)| mean_rows(x, lo, hi))
        .collect()
}

pub fn pyramid_pool_backward(rows: usize, dim: usize, counts: &StageCounts, dy: &[f64]) -> Tensor {
    let mut dx = Tensor::zeros(&[rows, dim]);
    for (slot, &(lo, hi)) in counts.slots().iter().enumerate() {
        mean_rows_backward(&mut dx, lo, hi, &dy[slot * dim..(slot + 1) * dim]);
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LnConfig {
    pub input_dim: usize,
    pub num_classes: usize,
}

impl LnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(EtpError::invalid(
                "localization network needs positive input_dim and num_classes",
            ));
        }
        Ok(())
    }

    pub fn pooled_dim(&self) -> usize {
        5 * self.input_dim
    }
}

/// Non-local block, pyramid pooling and three linear heads. The
/// classification head has `K + 1` outputs; index `K` is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LnModel {
    pub nonlocal: NonLocalBlock,
    pub cls: Linear,
    pub comp: Linear,
    pub reg: Linear,
}

/// Raw head outputs for a batch of proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct LnOutput {
    /// `[N, K + 1]`
    pub logits: Tensor,
    /// `[N, 1]`
    pub completeness: Tensor,
    /// `[N, 2]`
    pub offsets: Tensor,
}

#[derive(Debug, Clone)]
pub struct LnCache {
    nonlocal: Vec<NonLocalCache>,
    counts: Vec<StageCounts>,
    rows: Vec<usize>,
    pooled: Tensor,
}

impl LnModel {
    pub fn new<R: Rng + ?Sized>(cfg: &LnConfig, rng: &mut R) -> Self {
        let d = cfg.input_dim;
        let f = cfg.pooled_dim();
        Self {
            nonlocal: NonLocalBlock::new("ln.nonlocal", d, (d / 2).max(1), rng),
            cls: Linear::new("ln.cls", f, cfg.num_classes + 1, rng),
            comp: Linear::new("ln.comp", f, 1, rng),
            reg: Linear::new("ln.reg", f, 2, rng),
        }
    }

    pub fn zeros(cfg: &LnConfig) -> Self {
        let d = cfg.input_dim;
        let f = cfg.pooled_dim();
        Self {
            nonlocal: NonLocalBlock::zeros("ln.nonlocal", d, (d / 2).max(1)),
            cls: Linear::zeros("ln.cls", f, cfg.num_classes + 1),
            comp: Linear::zeros("ln.comp", f, 1),
            reg: Linear::zeros("ln.reg", f, 2),
        }
    }

    pub fn config(&self) -> LnConfig {
        LnConfig {
            input_dim: self.nonlocal.dim(),
            num_classes: self.cls.d_out() - 1,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.cls.d_out() - 1
    }

    /// Non-local block followed by pyramid pooling for one proposal.
    pub fn pyramid_feature(&self, input: &LnInput) -> Result<(Vec<f64>, NonLocalCache)> {
        if input.counts.course == 0 {
            return Err(EtpError::invalid("course stage has no units"));
        }
        let (z, cache) = self.nonlocal.forward(&input.units)?;
        Ok((pyramid_pool(&z, &input.counts), cache))
    }

    pub fn forward(&self, inputs: &[&LnInput]) -> Result<(LnOutput, LnCache)> {
        let mut pooled = Vec::with_capacity(inputs.len());
        let mut caches = Vec::with_capacity(inputs.len());
        for input in inputs {
            let (f, cache) = self.pyramid_feature(input)?;
            pooled.push(f);
            caches.push(cache);
        }
        let pooled = if pooled.is_empty() {
            Tensor::zeros(&[0, self.cls.d_in()])
        } else {
            Tensor::from_rows(&pooled)?
        };
        let out = LnOutput {
            logits: self.cls.forward(&pooled)?,
            completeness: self.comp.forward(&pooled)?,
            offsets: self.reg.forward(&pooled)?,
        };
        let cache = LnCache {
            nonlocal: caches,
            counts: inputs.iter().map(|i| i.counts).collect(),
            rows: inputs.iter().map(|i| i.units.rows()).collect(),
            pooled,
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients for upstream gradients on each head.
    pub fn backward(&mut self, cache: &LnCache, grads: &LnOutput) -> Result<()> {
        let mut d_pooled = self.cls.backward(&cache.pooled, &grads.logits)?;
        d_pooled.add_scaled(&self.comp.backward(&cache.pooled, &grads.completeness)?, 1.0)?;
        d_pooled.add_scaled(&self.reg.backward(&cache.pooled, &grads.offsets)?, 1.0)?;
        let dim = self.nonlocal.dim();
        for (i, nl) in cache.nonlocal.iter().enumerate() {
            let dz = pyramid_pool_backward(cache.rows[i], dim, &cache.counts[i], d_pooled.row(i));
            self.nonlocal.backward(nl, &dz)?;
        }
        Ok(())
    }
}

impl Module for LnModel {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.nonlocal.params();
        p.extend(self.cls.params());
        p.extend(self.comp.params());
        p.extend(self.reg.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.nonlocal.params_mut();
        p.extend(self.cls.params_mut());
        p.extend(self.comp.params_mut());
        p.extend(self.reg.params_mut());
        p
    }
}
