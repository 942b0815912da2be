//! Detection scoring: greedy IoU matching, step-integrated average precision
//! and mean AP over IoU thresholds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{EtpError, Result};
use crate::localization::Detection;
use crate::timeline::{iou, rank_order, GroundTruthInstance, ScoredInterval, TemporalInterval};

/// Default IoU thresholds.
pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

/// Marks each detection (already in rank order) as a true positive if it
/// overlaps an unmatched groundtruth by at least `alpha`. The highest-IoU
/// candidate wins; ties go to the earliest groundtruth.
pub fn match_detections(dets: &[TemporalInterval], gts: &[TemporalInterval], alpha: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = iou(d, gt);
                if v < alpha {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((b, bv)) => v > bv || (v == bv && gt.start() < gts[b].start()),
                };
                if better {
                    best = Some((g, v));
                }
            }
            let (g, _) = best?;
            taken[g] = true;
            Some(g)
        })
        .collect()
}

/// `Σ (r_i - r_{i-1}) p_i` over ranks; 0 when there is no groundtruth.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (rank, &hit) in flags.iter().enumerate() {
        if hit {
            tp += 1;
            let recall = tp as f64 / num_gt as f64;
            ap += (recall - prev_recall) * (tp as f64 / (rank + 1) as f64);
            prev_recall = recall;
        }
    }
    ap
}

/// One video's detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoDetections {
    pub video_id: String,
    pub detections: Vec<Detection>,
}

/// One video's groundtruth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoGroundTruth {
    pub video_id: String,
    pub instances: Vec<GroundTruthInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub threshold: f64,
    pub video_id: String,
    pub label: usize,
    pub interval: TemporalInterval,
    pub score: f64,
    /// Index of the matched instance within its video, `None` for a false positive.
    pub matched: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub thresholds: Vec<f64>,
    /// `ap[class][threshold]`; `None` for classes without groundtruth.
    pub ap: Vec<Vec<Option<f64>>>,
    pub map: Vec<f64>,
    pub matches: Vec<MatchRecord>,
}

impl EvalReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - threshold).abs() < 1e-12)
            .map(|i| self.map[i])
    }

    /// Classes by thresholds, with a closing mAP row.
    pub fn table(&self) -> String {
        let name_width = self
            .classes
            .iter()
            .map(String::len)
            .chain(["class".len(), "mAP".len()])
            .max()
            .unwrap_or(5);
        let mut out = format!("{:<name_width$}", "class");
        for t in &self.thresholds {
            let _ = write!(out, "  {:>7}", format!("@{t:.2}"));
        }
        out.push('\n');
        for (name, row) in self.classes.iter().zip(&self.ap) {
            let _ = write!(out, "{name:<name_width$}");
            for v in row {
                match v {
                    Some(ap) => {
                        let _ = write!(out, "  {ap:>7.4}");
                    }
                    None => {
                        let _ = write!(out, "  {:>7}", "-");
                    }
                }
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<name_width$}", "mAP");
        for m in &self.map {
            let _ = write!(out, "  {m:>7.4}");
        }
        out.push('\n');
        out
    }
}

/// Per-class AP at each threshold with detections pooled across videos and
/// ranked globally. Videos are paired by id; detections for unknown videos
/// or out-of-range labels are rejected.
pub fn map_at(
    dets: &[VideoDetections],
    gts: &[VideoGroundTruth],
    classes: &[String],
    thresholds: &[f64],
) -> Result<EvalReport> {
    let k = classes.len();
    for t in thresholds {
        if !(0.0..=1.0).contains(t) {
            return Err(EtpError::invalid(format!("IoU threshold {t} outside [0,1]")));
        }
    }
    let video_index = |id: &str| gts.iter().position(|g| g.video_id == id);
    let mut pooled: Vec<(usize, usize, Detection)> = Vec::new();
    for vd in dets {
        let v = video_index(&vd.video_id)
            .ok_or_else(|| EtpError::invalid(format!("detections for unknown video `{}`", vd.video_id)))?;
        for (i, d) in vd.detections.iter().enumerate() {
            if d.label >= k {
                return Err(EtpError::invalid(format!(
                    "detection label {} outside {k} classes in video `{}`",
                    d.label, vd.video_id
                )));
            }
            pooled.push((v, i, *d));
        }
    }
    for g in gts {
        if let Some(bad) = g.instances.iter().find(|i| i.label >= k) {
            return Err(EtpError::invalid(format!(
                "groundtruth label {} outside {k} classes in video `{}`",
                bad.label, g.video_id
            )));
        }
    }
    pooled.sort_by(|a, b| {
        rank_order(&scored(&a.2), &scored(&b.2))
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });

    let mut ap = vec![vec![None; thresholds.len()]; k];
    let mut matches = Vec::new();
    for (ti, &alpha) in thresholds.iter().enumerate() {
        for (class, row) in ap.iter_mut().enumerate() {
            let num_gt: usize = gts
                .iter()
                .map(|g| g.instances.iter().filter(|i| i.label == class).count())
                .sum();
            let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.instances.len()]).collect();
            let mut flags = Vec::new();
            for &(v, _, d) in pooled.iter().filter(|p| p.2.label == class) {
                let candidates: Vec<(usize, TemporalInterval)> = gts[v]
                    .instances
                    .iter()
                    .enumerate()
                    .filter(|(j, inst)| inst.label == class && !taken[v][*j])
                    .map(|(j, inst)| (j, inst.interval))
                    .collect();
                let spans: Vec<TemporalInterval> = candidates.iter().map(|c| c.1).collect();
                let hit = match_detections(&[d.interval], &spans, alpha)[0].map(|c| candidates[c].0);
                if let Some(j) = hit {
                    taken[v][j] = true;
                }
                flags.push(hit.is_some());
                matches.push(MatchRecord {
                    threshold: alpha,
                    video_id: gts[v].video_id.clone(),
                    label: class,
                    interval: d.interval,
                    score: d.score,
                    matched: hit,
                });
            }
            row[ti] = (num_gt > 0).then(|| average_precision(&flags, num_gt));
        }
    }

    let map = (0..thresholds.len())
        .map(|ti| {
            let vals: Vec<f64> = ap.iter().filter_map(|row| row[ti]).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect();
    Ok(EvalReport {
        classes: classes.to_vec(),
        thresholds: thresholds.to_vec(),
        ap,
        map,
        matches,
    })
}

fn scored(d: &Detection) -> ScoredInterval {
    ScoredInterval::new(d.interval, d.score)
}

/// Sorts detections into rank order (score descending, earlier start,
/// shorter length).
pub fn sort_by_rank(dets: &mut [Detection]) {
    dets.sort_by(|a, b| rank_order(&scored(a), &scored(b)));
}

/// Mean absolute start/end error over `(prediction, groundtruth)` pairs,
/// counting both boundaries of every pair.
pub fn mean_boundary_error(pairs: &[(TemporalInterval, TemporalInterval)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total: usize = pairs
        .iter()
        .map(|(p, g)| p.start().abs_diff(g.start()) + p.end().abs_diff(g.end()))
        .sum();
    total as f64 / (2 * pairs.len()) as f64
}
