//! Unit cropping, unit features and the center/log-span offset encoding.

use serde::{Deserialize, Serialize};

use crate::error::{EtpError, Result};
use crate::tensor::Tensor;
use crate::timeline::TemporalInterval;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitConfig {
    pub unit_len: usize,
    pub stride: usize,
}

impl Default for UnitConfig {
    fn default() -> Self {
        Self {
            unit_len: 64,
            stride: 32,
        }
    }
}

impl UnitConfig {
    /// Stride defaults to half the unit length.
    pub fn with_len(unit_len: usize) -> Self {
        Self {
            unit_len,
            stride: (unit_len / 2).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.unit_len < 2 {
            return Err(EtpError::invalid("unit_len must be at least 2"));
        }
        if self.stride < 1 {
            return Err(EtpError::invalid("stride must be at least 1"));
        }
        Ok(())
    }
}

/// A unit span and its context-augmented range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Unit {
    pub span: TemporalInterval,
    pub context_span: TemporalInterval,
}

impl Unit {
    /// Extends `span` by half its length on each side, clamped to `[0, num_frames)`.
    pub fn with_context(span: TemporalInterval, num_frames: usize) -> Self {
        let half = span.len() / 2;
        let lo = span.start().saturating_sub(half);
        let hi = (span.end() + half).min(num_frames).max(span.end());
        Self {
            span,
            context_span: TemporalInterval::new(lo, hi).expect("context contains span"),
        }
    }
}

/// Crops `p` into fixed-length units on a `stride` grid starting at
/// `p.start`. Proposals shorter than one unit give a single unit covering
/// the proposal.
pub fn crop_units(p: &TemporalInterval, unit_len: usize, stride: usize, num_frames: usize) -> Vec<Unit> {
    if p.len() < unit_len {
        return vec![Unit::with_context(*p, num_frames)];
    }
    let stride = stride.max(1);
    (p.start()..)
        .step_by(stride)
        .take_while(|s| s + unit_len <= p.end())
        .map(|s| {
            let span = TemporalInterval::new(s, s + unit_len).expect("unit_len >= 1");
            Unit::with_context(span, num_frames)
        })
        .collect()
}

/// Mean frame feature over the unit's context span.
pub fn unit_feature(features: &Tensor, unit: &Unit) -> Vec<f64> {
    span_mean(features, &unit.context_span)
}

/// Mean of feature rows over `span` (which must lie inside the matrix).
pub fn span_mean(features: &Tensor, span: &TemporalInterval) -> Vec<f64> {
    crate::tensor::ops::mean_rows(features, span.start(), span.end())
}

/// Stacks unit features into an `L x D` matrix.
pub fn unit_matrix(features: &Tensor, units: &[Unit]) -> Tensor {
    let rows: Vec<Vec<f64>> = units.iter().map(|u| unit_feature(features, u)).collect();
    Tensor::from_rows(&rows).expect("unit features share the feature width")
}

/// Normalized center offset and log length ratio.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegressionTarget {
    pub c: f64,
    pub s: f64,
}

impl RegressionTarget {
    pub fn new(c: f64, s: f64) -> Self {
        Self { c, s }
    }
}

/// `c = (center(gt) - center(anchor)) / len(anchor)`, `s = ln(len(gt) / len(anchor))`.
pub fn regression_target(gt: &TemporalInterval, anchor: &TemporalInterval) -> RegressionTarget {
    let la = anchor.len() as f64;
    RegressionTarget {
        c: (gt.center() - anchor.center()) / la,
        s: (gt.len() as f64 / la).ln(),
    }
}

/// Inverse of [`regression_target`] in continuous coordinates: `(center, length)`.
pub fn decode_offsets(anchor: &TemporalInterval, t: &RegressionTarget) -> (f64, f64) {
    let la = anchor.len() as f64;
    (anchor.center() + t.c * la, la * t.s.exp())
}

/// Applies offsets to an anchor and snaps to frames: rounded to the nearest
/// frame, clamped to `[0, num_frames)`, at least one frame long.
pub fn apply_offsets(anchor: &TemporalInterval, t: &RegressionTarget, num_frames: usize) -> TemporalInterval {
    let (center, length) = decode_offsets(anchor, t);
    let limit = num_frames.max(1) as f64;
    let lo = (center - length / 2.0).round().clamp(0.0, limit);
    let hi = (center + length / 2.0).round().clamp(0.0, limit);
    let (mut start, mut end) = (lo as usize, hi as usize);
    if end <= start {
        if start >= num_frames.max(1) {
            start = num_frames.max(1) - 1;
        }
        end = start + 1;
    }
    TemporalInterval::new(start, end).expect("non-empty by construction")
}

/// Snaps both boundaries to the nearest multiple of `stride`, keeping the
/// result inside `[0, num_frames)` and at least one stride long where the
/// video allows.
pub fn snap_to_grid(p: &TemporalInterval, stride: usize, num_frames: usize) -> TemporalInterval {
    let stride = stride.max(1);
    let snap = |v: usize| ((v as f64 / stride as f64).round() as usize) * stride;
    let mut start = snap(p.start());
    let mut end = snap(p.end()).min(num_frames);
    if end <= start {
        end = (start + stride).min(num_frames);
        if end <= start {
            end = num_frames;
            start = num_frames.saturating_sub(stride);
        }
    }
    TemporalInterval::new(start, end).expect("snapped anchor is non-empty")
}
