//! Initial proposal generation from per-frame class-score tracks.
//!
//! Each class track (plus the class-average track) is grown into connected
//! components twice, once raw and once Gaussian-smoothed. All candidates are
//! pooled and pruned with a single class-agnostic NMS pass.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EtpError, Result};
use crate::timeline::{nms_indices, ScoredInterval, TemporalInterval};

/// Per-frame class scores, `num_frames x num_classes`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTrack {
    num_frames: usize,
    num_classes: usize,
    scores: Vec<f64>,
}

impl ScoreTrack {
    pub fn new(num_frames: usize, num_classes: usize, scores: Vec<f64>) -> Result<Self> {
        if num_frames == 0 || num_classes == 0 {
            return Err(EtpError::invalid("score track needs T >= 1 and K >= 1"));
        }
        if scores.len() != num_frames * num_classes {
            return Err(EtpError::invalid(format!(
                "score track has {} values, expected {num_frames}x{num_classes}",
                scores.len()
            )));
        }
        if let Some(pos) = scores.iter().position(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(EtpError::invalid(format!(
                "score {} at frame {} class {} is outside [0,1]",
                scores[pos],
                pos / num_classes,
                pos % num_classes
            )));
        }
        Ok(Self {
            num_frames,
            num_classes,
            scores,
        })
    }

    /// Builds a track from per-class columns.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let k = columns.len();
        let t = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != t) {
            return Err(EtpError::invalid("score columns differ in length"));
        }
        let mut scores = Vec::with_capacity(t * k);
        for frame in 0..t {
            scores.extend(columns.iter().map(|c| c[frame]));
        }
        Self::new(t, k, scores)
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn class_track(&self, class: usize) -> Vec<f64> {
        self.scores
            .chunks_exact(self.num_classes)
            .map(|row| row[class])
            .collect()
    }

    /// Mean over classes at each frame.
    pub fn average_track(&self) -> Vec<f64> {
        let k = self.num_classes as f64;
        self.scores
            .chunks_exact(self.num_classes)
            .map(|row| row.iter().sum::<f64>() / k)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionnessConfig {
    pub threshold: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub smooth_sigma: f64,
    pub nms_threshold: f64,
}

impl Default for ActionnessConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_len: 16,
            max_len: 1024,
            smooth_sigma: 2.0,
            nms_threshold: 0.36,
        }
    }
}

impl ActionnessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(EtpError::invalid(format!(
                "threshold {} must lie in (0,1)",
                self.threshold
            )));
        }
        if self.min_len < 1 || self.min_len >= self.max_len {
            return Err(EtpError::invalid(format!(
                "need 1 <= min_len < max_len, got {} and {}",
                self.min_len, self.max_len
            )));
        }
        if !(self.smooth_sigma > 0.0 && self.smooth_sigma.is_finite()) {
            return Err(EtpError::invalid("smooth_sigma must be positive"));
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(EtpError::invalid("nms_threshold must lie in [0,1]"));
        }
        Ok(())
    }
}

/// A proposal from the actionness stage. `class == num_classes` marks a
/// class-agnostic candidate from the average track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionProposal {
    pub interval: TemporalInterval,
    pub score: f64,
    pub class: usize,
}

/// Result of a component-growth run, with the number of loop iterations used.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthTrace {
    pub intervals: Vec<TemporalInterval>,
    /// Loop iteration (1-based) in which each interval was frozen.
    pub rounds: Vec<usize>,
    pub iterations: usize,
    pub hit_cap: bool,
}

/// Connected-component growth on a thresholded score vector.
///
/// Seeds are the frames scoring at least `threshold`. While more than one
/// component remains, every component is dilated by one frame per side
/// (clamped to the timeline), intersecting components are merged, and any
/// component with `min_len < len < max_len` is frozen into the result.
pub fn conn_component(scores: &[f64], min_len: usize, max_len: usize, threshold: f64) -> Vec<TemporalInterval> {
    conn_component_traced(scores, min_len, max_len, threshold).intervals
}

pub fn conn_component_traced(scores: &[f64], min_len: usize, max_len: usize, threshold: f64) -> GrowthTrace {
    let frames = scores.len();
    // (start, end) half-open, kept sorted by start and pairwise disjoint
    let mut live: Vec<(usize, usize)> = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= threshold)
        .map(|(i, _)| (i, i + 1))
        .collect();
    let mut frozen = Vec::new();
    let cap = 2 * frames;
    let mut iterations = 0;
    let mut hit_cap = false;

    while live.len() > 1 {
        if iterations >= cap {
            hit_cap = true;
            break;
        }
        iterations += 1;

        let before = live.clone();
        for c in live.iter_mut() {
            c.0 = c.0.saturating_sub(1);
            c.1 = (c.1 + 1).min(frames);
        }

        let mut merged: Vec<(usize, usize)> = Vec::with_capacity(live.len());
        for c in live.drain(..) {
            match merged.last_mut() {
                Some(last) if c.0 < last.1 => last.1 = last.1.max(c.1),
                _ => merged.push(c),
            }
        }

        let emitted_before = frozen.len();
        for c in merged {
            let len = c.1 - c.0;
            if min_len < len && len < max_len {
                frozen.push((c, iterations));
            } else {
                live.push(c);
            }
        }

        if frozen.len() == emitted_before && live == before {
            break;
        }
    }

    frozen.sort_unstable();
    GrowthTrace {
        intervals: frozen
            .iter()
            .map(|&((s, e), _)| TemporalInterval::new(s, e).expect("components are non-empty"))
            .collect(),
        rounds: frozen.iter().map(|&(_, r)| r).collect(),
        iterations,
        hit_cap,
    }
}

/// Gaussian smoothing with a kernel truncated at `ceil(4 sigma)`, normalized
/// to unit mass, using half-sample symmetric reflection at both ends.
pub fn smooth_track(scores: &[f64], sigma: f64) -> Vec<f64> {
    let n = scores.len();
    if n == 0 {
        return Vec::new();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let mass: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= mass);

    let period = 2 * n as isize;
    let reflect = |i: isize| -> usize {
        let m = i.rem_euclid(period);
        if m < n as isize {
            m as usize
        } else {
            (period - 1 - m) as usize
        }
    };

    (0..n as isize)
        .map(|t| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * scores[reflect(t + k as isize - radius)])
                .sum()
        })
        .collect()
}

fn mean_over(track: &[f64], iv: &TemporalInterval) -> f64 {
    track[iv.start()..iv.end()].iter().sum::<f64>() / iv.len() as f64
}

fn track_candidates(track: &[f64], class: usize, cfg: &ActionnessConfig) -> Vec<ActionProposal> {
    let smoothed = smooth_track(track, cfg.smooth_sigma);
    let mut out = Vec::new();
    for source in [track, smoothed.as_slice()] {
        for iv in conn_component(source, cfg.min_len, cfg.max_len, cfg.threshold) {
            out.push(ActionProposal {
                interval: iv,
                score: mean_over(source, &iv),
                class,
            });
        }
    }
    out
}

/// Runs component growth on every class track and the average track, raw
/// and smoothed, then prunes the pooled candidates with NMS.
pub fn generate_proposals(track: &ScoreTrack, cfg: &ActionnessConfig) -> Vec<ActionProposal> {
    let k = track.num_classes();
    let candidates: Vec<ActionProposal> = (0..=k)
        .into_par_iter()
        .map(|class| {
            let scores = if class == k {
                track.average_track()
            } else {
                track.class_track(class)
            };
            track_candidates(&scores, class, cfg)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();

    let scored: Vec<ScoredInterval> = candidates
        .iter()
        .map(|c| ScoredInterval::new(c.interval, c.score))
        .collect();
    nms_indices(&scored, cfg.nms_threshold)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}
