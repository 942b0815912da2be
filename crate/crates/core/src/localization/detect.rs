use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{LnInput, LnModel};
use crate::error::Result;
use crate::refinement::units::{apply_offsets, RegressionTarget, UnitConfig};
use crate::tensor::ops::softmax_in_place;
use crate::tensor::Tensor;
use crate::timeline::{nms_indices, ScoredInterval, TemporalInterval};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub interval: TemporalInterval,
    pub label: usize,
    pub score: f64,
}

/// Turns one proposal's head outputs into a detection. The top action class
/// is kept only if it beats the background probability (last logit); the
/// score is `p_k * exp(s_comp)`.
pub fn decide(
    logits: &[f64],
    completeness: f64,
    offsets: RegressionTarget,
    proposal: &TemporalInterval,
    num_frames: usize,
) -> Option<Detection> {
    let mut probs = logits.to_vec();
    softmax_in_place(&mut probs);
    let (&p_bg, actions) = probs.split_last()?;
    let (label, &p) = actions
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
    if p <= p_bg {
        return None;
    }
    Some(Detection {
        interval: apply_offsets(proposal, &offsets, num_frames),
        label,
        score: p * completeness.exp(),
    })
}

/// Per-class NMS, returning survivors sorted by score (ties: earlier start,
/// shorter, lower class).
pub fn per_class_nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let num_classes = dets.iter().map(|d| d.label + 1).max().unwrap_or(0);
    let mut kept = Vec::new();
    for class in 0..num_classes {
        let members: Vec<&Detection> = dets.iter().filter(|d| d.label == class).collect();
        let scored: Vec<ScoredInterval> = members
            .iter()
            .map(|d| ScoredInterval::new(d.interval, d.score))
            .collect();
        kept.extend(nms_indices(&scored, threshold).into_iter().map(|i| *members[i]));
    }
    kept.sort_by(|a, b| {
        crate::timeline::rank_order(
            &ScoredInterval::new(a.interval, a.score),
            &ScoredInterval::new(b.interval, b.score),
        )
        .then(a.label.cmp(&b.label))
    });
    kept
}

/// Scores every proposal of one video and applies per-class NMS.
pub fn rank_and_detect(
    model: &LnModel,
    features: &Tensor,
    proposals: &[TemporalInterval],
    units: &UnitConfig,
    nms_threshold: f64,
) -> Result<Vec<Detection>> {
    let num_frames = features.rows();
    let decided: Vec<Option<Detection>> = proposals
        .par_iter()
        .map(|p| -> Result<Option<Detection>> {
            let input = LnInput::new(features, p, units)?;
            let (out, _) = model.forward(&[&input])?;
            let o = out.offsets.row(0);
            Ok(decide(
                out.logits.row(0),
                out.completeness.data()[0],
                RegressionTarget::new(o[0], o[1]),
                p,
                num_frames,
            ))
        })
        .collect::<Result<_>>()?;
    let dets: Vec<Detection> = decided.into_iter().flatten().collect();
    Ok(per_class_nms(&dets, nms_threshold))
}
