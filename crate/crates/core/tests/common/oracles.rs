//! Slow literal reference implementations.

use std::collections::BTreeSet;

use etp::timeline::TemporalInterval;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

/// Component growth on explicit frame sets: threshold, then repeatedly
/// dilate every live set by one frame per side, merge intersecting sets
/// pairwise until none intersect, and freeze sets whose size lies strictly
/// between the length bounds. Stops when at most one set is live, when a
/// round changes nothing, or after `2T` rounds (reported as `true`).
pub fn naive_growth(scores: &[f64], min_len: usize, max_len: usize, t: f64) -> (BTreeSet<(usize, usize)>, bool) {
    let n = scores.len();
    let mut live: Vec<BTreeSet<usize>> = (0..n)
        .filter(|&i| scores[i] >= t)
        .map(|i| BTreeSet::from([i]))
        .collect();
    let mut frozen: Vec<BTreeSet<usize>> = Vec::new();
    let mut rounds = 0;
    while live.len() > 1 {
        if rounds >= 2 * n {
            return (BTreeSet::new(), true);
        }
        rounds += 1;
        let mut snapshot = live.clone();
        for c in live.iter_mut() {
            let lo = *c.first().unwrap();
            let hi = *c.last().unwrap();
            if lo > 0 {
                c.insert(lo - 1);
            }
            if hi + 1 < n {
                c.insert(hi + 1);
            }
        }
        'merge: loop {
            for i in 0..live.len() {
                for j in i + 1..live.len() {
                    if !live[i].is_disjoint(&live[j]) {
                        let b = live.remove(j);
                        live[i].extend(b);
                        continue 'merge;
                    }
                }
            }
            break;
        }
        let before = frozen.len();
        let (keep, done): (Vec<_>, Vec<_>) = live
            .into_iter()
            .partition(|c| !(min_len < c.len() && c.len() < max_len));
        frozen.extend(done);
        live = keep;
        let mut now = live.clone();
        now.sort();
        snapshot.sort();
        if frozen.len() == before && now == snapshot {
            break;
        }
    }
    let spans = frozen
        .iter()
        .map(|c| {
            let lo = *c.first().unwrap();
            let hi = *c.last().unwrap() + 1;
            assert_eq!(c.len(), hi - lo, "dilated components stay contiguous");
            (lo, hi)
        })
        .collect();
    (spans, false)
}

/// Frame-count IoU computed by enumerating frames.
pub fn frame_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = (a.0.max(b.0)..a.1.min(b.1)).count();
    let union = (a.0.min(b.0)..a.1.max(b.1))
        .filter(|&f| (a.0..a.1).contains(&f) || (b.0..b.1).contains(&f))
        .count();
    inter as f64 / union as f64
}

/// A ranked detection list for one class in one video.
#[derive(Debug, Clone)]
pub struct ApInstance {
    pub dets: Vec<((usize, usize), f64)>,
    pub gts: Vec<(usize, usize)>,
}

pub fn random_ap_instance(rng: &mut ChaCha8Rng) -> ApInstance {
    let span = |rng: &mut ChaCha8Rng| {
        let s = rng.random_range(0..100);
        (s, s + rng.random_range(1..30))
    };
    let n_gt = rng.random_range(1..=10);
    let n_det = rng.random_range(0..=20);
    ApInstance {
        gts: (0..n_gt).map(|_| span(rng)).collect(),
        dets: (0..n_det)
            .map(|_| (span(rng), rng.random_range(1..50) as f64 / 50.0))
            .collect(),
    }
}

/// Rank order: score descending, then earlier start, then shorter span.
pub fn ranked(dets: &[((usize, usize), f64)]) -> Vec<((usize, usize), f64)> {
    let mut out = dets.to_vec();
    out.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then(a.0 .0.cmp(&b.0 .0))
            .then((a.0 .1 - a.0 .0).cmp(&(b.0 .1 - b.0 .0)))
    });
    out
}

/// Greedy matching over a ranked prefix: each detection takes the free
/// groundtruth of highest IoU at least `alpha`, ties to the earliest start.
fn true_positives(prefix: &[((usize, usize), f64)], gts: &[(usize, usize)], alpha: f64) -> usize {
    let mut taken = vec![false; gts.len()];
    let mut tp = 0;
    for (span, _) in prefix {
        let mut best: Option<(usize, f64)> = None;
        for (g, &gt) in gts.iter().enumerate() {
            let v = frame_iou(*span, gt);
            if taken[g] || v < alpha {
                continue;
            }
            if best.is_none_or(|(b, bv)| v > bv || (v == bv && gt.0 < gts[b].0)) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            tp += 1;
        }
    }
    tp
}

/// AP by enumerating every ranked prefix, re-matching each from scratch,
/// and summing `(recall_k - recall_{k-1}) * precision_k`.
pub fn prefix_ap(inst: &ApInstance, alpha: f64) -> f64 {
    let order = ranked(&inst.dets);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 1..=order.len() {
        let tp = true_positives(&order[..k], &inst.gts, alpha);
        let recall = tp as f64 / inst.gts.len() as f64;
        ap += (recall - prev_recall) * (tp as f64 / k as f64);
        prev_recall = recall;
    }
    ap
}

pub fn iv(s: usize, e: usize) -> TemporalInterval {
    TemporalInterval::new(s, e).unwrap()
}
