//! Interval algebra on the video timeline: temporal IoU, greedy non-maximum
//! suppression and IoU-band labeling of proposals against groundtruth.
//!
//! Intervals are half-open `[start, end)` on 0-based frame indices. Files use
//! 1-based closed spans; conversion happens in [`crate::io`].

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{EtpError, Result};

/// IoU strictly above this marks a positive proposal.
pub const POSITIVE_IOU: f64 = 0.7;
/// IoU at or above this (and not positive) marks an incomplete proposal.
pub const INCOMPLETE_IOU: f64 = 0.3;
/// IoU strictly below this marks a background proposal.
pub const BACKGROUND_IOU: f64 = 0.1;

/// A contiguous frame span `[start, end)` with `end > start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemporalInterval {
    start: usize,
    end: usize,
}

impl TemporalInterval {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if end <= start {
            return Err(EtpError::Invalid(format!(
                "interval end {end} must exceed start {start}"
            )));
        }
        Ok(Self { start, end })
    }

    /// Checks `end <= num_frames` in addition to the basic invariant.
    pub fn within(start: usize, end: usize, num_frames: usize) -> Result<Self> {
        let iv = Self::new(start, end)?;
        if end > num_frames {
            return Err(EtpError::Invalid(format!(
                "interval [{start},{end}) exceeds video length {num_frames}"
            )));
        }
        Ok(iv)
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    /// Always false; present for clippy's `len_without_is_empty`.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Midpoint in continuous frame coordinates.
    pub fn center(&self) -> f64 {
        (self.start + self.end) as f64 / 2.0
    }

    pub fn intersection_len(&self, other: &Self) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        hi.saturating_sub(lo)
    }

    pub fn contains(&self, other: &Self) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

impl std::fmt::Display for TemporalInterval {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{},{})", self.start, self.end)
    }
}

/// An annotated action instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub interval: TemporalInterval,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredInterval {
    pub interval: TemporalInterval,
    pub score: f64,
}

impl ScoredInterval {
    pub fn new(interval: TemporalInterval, score: f64) -> Self {
        Self { interval, score }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProposalKind {
    Positive,
    Incomplete,
    Background,
    Ignored,
}

impl ProposalKind {
    pub fn from_iou(iou: f64) -> Self {
        if iou > POSITIVE_IOU {
            ProposalKind::Positive
        } else if iou >= INCOMPLETE_IOU {
            ProposalKind::Incomplete
        } else if iou < BACKGROUND_IOU {
            ProposalKind::Background
        } else {
            ProposalKind::Ignored
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalLabel {
    pub kind: ProposalKind,
    /// Index into the groundtruth list the proposal was labeled against.
    pub matched_gt: Option<usize>,
    pub iou: f64,
}

/// Temporal IoU on frame counts. Symmetric, 0 for disjoint spans.
pub fn iou(a: &TemporalInterval, b: &TemporalInterval) -> f64 {
    let inter = a.intersection_len(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Score descending, then earlier start, then shorter length.
pub fn rank_order(a: &ScoredInterval, b: &ScoredInterval) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.interval.start.cmp(&b.interval.start))
        .then_with(|| a.interval.len().cmp(&b.interval.len()))
}

/// Greedy non-maximum suppression. A candidate survives iff its IoU with every
/// already-kept interval is at most `threshold`. Output is in rank order.
pub fn nms(candidates: &[ScoredInterval], threshold: f64) -> Vec<ScoredInterval> {
    nms_indices(candidates, threshold)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}

/// Same as [`nms`] but returns indices into `candidates`. Exact duplicates keep
/// the lower index.
pub fn nms_indices(candidates: &[ScoredInterval], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| rank_order(&candidates[a], &candidates[b]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::with_capacity(order.len());
    for idx in order {
        let cand = &candidates[idx].interval;
        if kept.iter().all(|&k| iou(&candidates[k].interval, cand) <= threshold) {
            kept.push(idx);
        }
    }
    kept
}

/// Labels a proposal by its best-overlapping groundtruth (ties: earliest start).
pub fn label_proposal(p: &TemporalInterval, gts: &[GroundTruthInstance]) -> ProposalLabel {
    let mut best: Option<(usize, f64)> = None;
    for (idx, gt) in gts.iter().enumerate() {
        let v = iou(p, &gt.interval);
        best = match best {
            None => Some((idx, v)),
            Some((b, bv)) => {
                let earlier = gt.interval.start < gts[b].interval.start;
                if v > bv || (v == bv && earlier) {
                    Some((idx, v))
                } else {
                    Some((b, bv))
                }
            }
        };
    }
    let (matched_gt, iou) = match best {
        Some((idx, v)) => (Some(idx), v),
        None => (None, 0.0),
    };
    ProposalLabel {
        kind: ProposalKind::from_iou(iou),
        matched_gt,
        iou,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iv(s: usize, e: usize) -> TemporalInterval {
        TemporalInterval::new(s, e).unwrap()
    }

    fn si(s: usize, e: usize, score: f64) -> ScoredInterval {
        ScoredInterval::new(iv(s, e), score)
    }

    #[test]
    fn rejects_empty_interval() {
        assert!(TemporalInterval::new(5, 5).is_err());
        assert!(TemporalInterval::new(6, 5).is_err());
        assert!(TemporalInterval::within(0, 11, 10).is_err());
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&iv(10, 50), &iv(10, 50)), 1.0);
        assert_eq!(iou(&iv(0, 10), &iv(20, 30)), 0.0);
        assert!((iou(&iv(0, 10), &iv(5, 15)) - 5.0 / 15.0).abs() < 1e-15);
        // touching spans share no frame
        assert_eq!(iou(&iv(0, 10), &iv(10, 20)), 0.0);
    }

    #[test]
    fn nms_examples() {
        assert_eq!(nms(&[si(0, 10, 0.9)], 0.36), vec![si(0, 10, 0.9)]);
        assert_eq!(nms(&[si(0, 10, 0.9), si(0, 10, 0.8)], 0.36), vec![si(0, 10, 0.9)]);
        assert_eq!(
            nms(&[si(0, 10, 0.9), si(50, 60, 0.8)], 0.36),
            vec![si(0, 10, 0.9), si(50, 60, 0.8)]
        );
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn nms_tie_break_prefers_earlier_then_shorter() {
        let out = nms(&[si(5, 15, 0.5), si(0, 12, 0.5), si(0, 10, 0.5)], 0.3);
        assert_eq!(out[0], si(0, 10, 0.5));
    }

    #[test]
    fn label_examples() {
        let gt = |s, e| GroundTruthInstance {
            interval: iv(s, e),
            label: 0,
        };
        let l = label_proposal(&iv(0, 100), &[gt(0, 100)]);
        assert_eq!(l.kind, ProposalKind::Positive);
        assert_eq!(l.iou, 1.0);
        let l = label_proposal(&iv(0, 100), &[gt(0, 150), gt(50, 150)]);
        assert_eq!(l.matched_gt, Some(0));
        let l = label_proposal(&iv(0, 100), &[gt(50, 150)]);
        assert_eq!(l.kind, ProposalKind::Incomplete);
        assert!((l.iou - 1.0 / 3.0).abs() < 1e-15);
        let l = label_proposal(&iv(0, 100), &[]);
        assert_eq!(l.kind, ProposalKind::Background);
        assert_eq!(l.matched_gt, None);
        assert_eq!(l.iou, 0.0);
    }

    #[test]
    fn label_ties_go_to_earliest_gt() {
        let gts = [
            GroundTruthInstance {
                interval: iv(10, 20),
                label: 1,
            },
            GroundTruthInstance {
                interval: iv(0, 10),
                label: 0,
            },
        ];
        let l = label_proposal(&iv(5, 15), &gts);
        assert_eq!(l.matched_gt, Some(1));
    }

    #[test]
    fn label_band_boundaries() {
        assert_eq!(ProposalKind::from_iou(0.7), ProposalKind::Incomplete);
        assert_eq!(ProposalKind::from_iou(0.7000001), ProposalKind::Positive);
        assert_eq!(ProposalKind::from_iou(0.3), ProposalKind::Incomplete);
        assert_eq!(ProposalKind::from_iou(0.2999), ProposalKind::Ignored);
        assert_eq!(ProposalKind::from_iou(0.1), ProposalKind::Ignored);
        assert_eq!(ProposalKind::from_iou(0.0999), ProposalKind::Background);
        assert_eq!(ProposalKind::from_iou(0.0), ProposalKind::Background);
        assert_eq!(ProposalKind::from_iou(1.0), ProposalKind::Positive);
    }

    fn arb_interval() -> impl Strategy<Value = TemporalInterval> {
        (0usize..200, 1usize..60).prop_map(|(s, l)| iv(s, s + l))
    }

    fn arb_candidates() -> impl Strategy<Value = Vec<ScoredInterval>> {
        prop::collection::vec(
            (arb_interval(), 0u32..20).prop_map(|(i, s)| ScoredInterval::new(i, s as f64 / 10.0)),
            0..30,
        )
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_interval(), b in arb_interval()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn nms_properties(cands in arb_candidates(), theta in 0.0f64..1.0, seed in any::<u64>()) {
            let once = nms(&cands, theta);
            for k in &once {
                prop_assert!(cands.contains(k));
            }
            prop_assert_eq!(nms(&once, theta), once.clone());
            for (i, a) in once.iter().enumerate() {
                for b in &once[i + 1..] {
                    prop_assert!(iou(&a.interval, &b.interval) <= theta);
                }
            }
            let mut shuffled = cands.clone();
            let n = shuffled.len();
            if n > 1 {
                let mut state = seed;
                for i in (1..n).rev() {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    let j = (state >> 33) as usize % (i + 1);
                    shuffled.swap(i, j);
                }
            }
            prop_assert_eq!(nms(&shuffled, theta), once);
        }
    }
}
