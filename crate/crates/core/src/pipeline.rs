//! The three phases chained over a dataset: actionness proposals on every
//! video, refinement and localization trained on the leading videos and
//! applied to the rest, then evaluation of the held-out detections.

use std::path::Path;

use log::info;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actionness::{generate_proposals, ActionnessConfig};
use crate::error::{EtpError, Result};
use crate::evaluation::{map_at, mean_boundary_error, EvalReport, VideoDetections, DEFAULT_THRESHOLDS};
use crate::io::checkpoint::{save_checkpoint, ModelKind};
use crate::io::documents::{save_items, write_json, Item, VideoItems};
use crate::io::synth::VideoData;
use crate::localization::{
    ln_samples, rank_and_detect, train_ln, Detection, LnConfig, LnCurve, LnModel, LnTrainConfig, LossWeights,
};
use crate::refinement::{refine_all, rn_samples, train_rn, RnConfig, RnModel, RnTrainConfig, UnitConfig};
use crate::tensor::optim::LrSchedule;
use crate::timeline::{label_proposal, GroundTruthInstance, ProposalKind, TemporalInterval};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Small networks and at most 2K iterations per network.
    Desk,
    /// Full-size networks and schedules.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub actionness: ActionnessConfig,
    pub units: UnitConfig,
    pub rn_hidden: usize,
    pub rn_depth: usize,
    pub rn_train: RnTrainConfig,
    pub ln_train: LnTrainConfig,
    /// Per-class NMS threshold on final detections.
    pub detect_nms: f64,
    /// Sliding-window lengths added to the refinement training pool.
    pub rn_windows: Vec<usize>,
    /// Jittered copies of each training groundtruth added to the refinement
    /// pool, each boundary shifted by at most one unit stride.
    pub rn_jitter: usize,
    /// Sliding-window lengths added to the localization training pool so it
    /// sees incomplete and background examples.
    pub ln_windows: Vec<usize>,
    /// Leading share of the videos used for training.
    pub train_fraction: f64,
    pub thresholds: Vec<f64>,
}

impl PipelineConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self {
                actionness: ActionnessConfig::default(),
                units: UnitConfig::default(),
                rn_hidden: 512,
                rn_depth: 2,
                rn_train: RnTrainConfig::default(),
                ln_train: LnTrainConfig::default(),
                detect_nms: ActionnessConfig::default().nms_threshold,
                rn_windows: Vec::new(),
                rn_jitter: 0,
                ln_windows: vec![64, 128, 256, 512],
                train_fraction: 0.75,
                thresholds: DEFAULT_THRESHOLDS.to_vec(),
            },
            Profile::Desk => Self {
                units: UnitConfig::with_len(8),
                rn_hidden: 32,
                rn_depth: 1,
                rn_train: RnTrainConfig {
                    batch_size: 32,
                    iterations: 2_000,
                    momentum: 0.9,
                    schedule: LrSchedule {
                        base: 0.1,
                        decay: 0.1,
                        every: 1_500,
                        floor: None,
                    },
                    seed: 0,
                },
                ln_train: LnTrainConfig {
                    batch_size: 36,
                    iterations: 2_000,
                    momentum: 0.9,
                    schedule: LrSchedule {
                        base: 0.05,
                        decay: 0.1,
                        every: 1_500,
                        floor: Some(1e-5),
                    },
                    weights: LossWeights::default(),
                    seed: 0,
                },
                rn_jitter: 16,
                ln_windows: vec![16, 32, 64, 128],
                ..Self::profile(Profile::Paper)
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.actionness.validate()?;
        self.units.validate()?;
        RnConfig {
            input_dim: 1,
            hidden: self.rn_hidden,
            depth: self.rn_depth,
        }
        .validate()?;
        self.rn_train.validate()?;
        self.ln_train.validate()?;
        if !(0.0..=1.0).contains(&self.detect_nms) {
            return Err(EtpError::invalid("detection NMS threshold must lie in [0,1]"));
        }
        if self.rn_windows.contains(&0) || self.ln_windows.contains(&0) {
            return Err(EtpError::invalid("training window lengths must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(EtpError::invalid("train_fraction must lie in (0,1)"));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(EtpError::invalid("IoU thresholds must be a non-empty list in [0,1]"));
        }
        Ok(())
    }

    /// Copies `seed` into both training configs, offset so the two networks
    /// never share a stream.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rn_train.seed = seed;
        self.ln_train.seed = seed.wrapping_add(1);
        self
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::profile(Profile::Desk)
    }
}

/// Index ranges of the training and test videos: the first
/// `ceil(n * fraction)` videos train, at least one video is held out.
pub fn split(n: usize, fraction: f64) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    if n < 2 {
        return Err(EtpError::invalid(format!("need at least 2 videos to split, got {n}")));
    }
    let cut = ((n as f64 * fraction).ceil() as usize).clamp(1, n - 1);
    Ok((0..cut, cut..n))
}

/// Actionness proposals of one video. Class-agnostic candidates carry no label.
pub fn propose(video: &VideoData, cfg: &ActionnessConfig) -> VideoItems {
    let k = video.scores.num_classes();
    VideoItems {
        video_id: video.annotation.video_id.clone(),
        items: generate_proposals(&video.scores, cfg)
            .into_iter()
            .map(|p| Item {
                interval: p.interval,
                label: (p.class < k).then_some(p.class),
                score: p.score,
            })
            .collect(),
    }
}

/// Every window of each length at half-length stride that fits the video.
pub fn sliding_windows(num_frames: usize, lengths: &[usize]) -> Vec<TemporalInterval> {
    let mut out = Vec::new();
    for &len in lengths.iter().filter(|&&l| l > 0 && l <= num_frames) {
        let step = (len / 2).max(1);
        let mut s = 0;
        while s + len <= num_frames {
            out.push(TemporalInterval::new(s, s + len).expect("positive length"));
            s += step;
        }
    }
    out
}

/// Proposals plus sliding windows, sorted and deduplicated.
pub fn training_pool(proposals: &[TemporalInterval], num_frames: usize, windows: &[usize]) -> Vec<TemporalInterval> {
    let mut pool: Vec<TemporalInterval> = proposals.to_vec();
    pool.extend(sliding_windows(num_frames, windows));
    pool.sort_by_key(|iv| (iv.start(), iv.end()));
    pool.dedup();
    pool
}

/// `copies` perturbations of every instance, each boundary moved by an
/// integer drawn uniformly from `[-max_shift, max_shift]`.
pub fn jittered_groundtruth<R: Rng + ?Sized>(
    gts: &[GroundTruthInstance],
    num_frames: usize,
    copies: usize,
    max_shift: usize,
    rng: &mut R,
) -> Vec<TemporalInterval> {
    let m = max_shift as i64;
    let mut out = Vec::with_capacity(gts.len() * copies);
    for g in gts {
        for _ in 0..copies {
            let s = (g.interval.start() as i64 + rng.random_range(-m..=m)).max(0) as usize;
            let e = ((g.interval.end() as i64 + rng.random_range(-m..=m)).max(0) as usize).min(num_frames);
            if let Ok(iv) = TemporalInterval::new(s, e) {
                out.push(iv);
            }
        }
    }
    out
}

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Refinement pools: each video's proposals, jittered copies of its
/// groundtruth and the configured sliding windows. Jitter draws from a
/// stream of the refinement seed.
pub fn rn_training_pools(
    videos: &[&VideoData],
    proposals: &[VideoItems],
    cfg: &PipelineConfig,
) -> Vec<Vec<TemporalInterval>> {
    let mut rng = init_rng(cfg.rn_train.seed, 3);
    videos
        .iter()
        .zip(proposals)
        .map(|(v, p)| {
            let mut pool = p.intervals();
            pool.extend(jittered_groundtruth(
                &v.annotation.instances,
                v.annotation.num_frames,
                cfg.rn_jitter,
                cfg.units.stride,
                &mut rng,
            ));
            training_pool(&pool, v.annotation.num_frames, &cfg.rn_windows)
        })
        .collect()
}

/// Localization pools: each video's (refined) proposals plus sliding windows.
pub fn ln_training_pools(
    videos: &[&VideoData],
    proposals: &[VideoItems],
    cfg: &PipelineConfig,
) -> Vec<Vec<TemporalInterval>> {
    videos
        .iter()
        .zip(proposals)
        .map(|(v, p)| training_pool(&p.intervals(), v.annotation.num_frames, &cfg.ln_windows))
        .collect()
}

/// Trains a refinement network on the given videos and their proposal pools.
pub fn train_refinement(
    videos: &[&VideoData],
    pools: &[Vec<TemporalInterval>],
    cfg: &PipelineConfig,
) -> Result<(RnModel, Vec<f64>)> {
    let dim = feature_dim(videos)?;
    let samples: Vec<_> = videos
        .iter()
        .zip(pools)
        .flat_map(|(v, pool)| rn_samples(&v.features, pool, &v.annotation.instances, &cfg.units))
        .collect();
    info!("refinement: {} training samples", samples.len());
    let rn_cfg = RnConfig {
        input_dim: dim,
        hidden: cfg.rn_hidden,
        depth: cfg.rn_depth,
    };
    rn_cfg.validate()?;
    let mut model = RnModel::new(&rn_cfg, &mut init_rng(cfg.rn_train.seed, 1));
    let curve = train_rn(&mut model, &samples, &cfg.rn_train)?;
    Ok((model, curve))
}

/// Trains a localization network on the given videos and their proposal pools.
pub fn train_localization(
    videos: &[&VideoData],
    pools: &[Vec<TemporalInterval>],
    num_classes: usize,
    cfg: &PipelineConfig,
) -> Result<(LnModel, LnCurve)> {
    let dim = feature_dim(videos)?;
    let per_video: Vec<_> = videos
        .par_iter()
        .zip(pools)
        .map(|(v, pool)| ln_samples(&v.features, pool, &v.annotation.instances, &cfg.units, num_classes))
        .collect::<Result<_>>()?;
    let samples: Vec<_> = per_video.into_iter().flatten().collect();
    let count = |k: ProposalKind| samples.iter().filter(|s| s.kind == k).count();
    info!(
        "localization: {} positives, {} incompletes, {} backgrounds",
        count(ProposalKind::Positive),
        count(ProposalKind::Incomplete),
        count(ProposalKind::Background)
    );
    let ln_cfg = LnConfig {
        input_dim: dim,
        num_classes,
    };
    ln_cfg.validate()?;
    let mut model = LnModel::new(&ln_cfg, &mut init_rng(cfg.ln_train.seed, 2));
    let curve = train_ln(&mut model, &samples, &cfg.ln_train)?;
    Ok((model, curve))
}

fn feature_dim(videos: &[&VideoData]) -> Result<usize> {
    let dim = videos
        .first()
        .ok_or_else(|| EtpError::invalid("no training videos"))?
        .features
        .cols();
    if let Some(v) = videos.iter().find(|v| v.features.cols() != dim) {
        return Err(EtpError::invalid(format!(
            "video `{}` has feature width {}, expected {dim}",
            v.annotation.video_id,
            v.features.cols()
        )));
    }
    Ok(dim)
}

/// Replaces every interval with its refinement, keeping labels and scores.
pub fn refine_items(model: &RnModel, video: &VideoData, items: &VideoItems, units: &UnitConfig) -> Result<VideoItems> {
    let refined = refine_all(model, &video.features, &items.intervals(), units)?;
    Ok(VideoItems {
        video_id: items.video_id.clone(),
        items: items
            .items
            .iter()
            .zip(refined)
            .map(|(it, interval)| Item { interval, ..*it })
            .collect(),
    })
}

pub fn localize(
    model: &LnModel,
    video: &VideoData,
    proposals: &[TemporalInterval],
    units: &UnitConfig,
    nms_threshold: f64,
) -> Result<Vec<Detection>> {
    rank_and_detect(model, &video.features, proposals, units, nms_threshold)
}

/// A proposal and the groundtruth it is measured against.
pub type BoundaryPair = (TemporalInterval, TemporalInterval);

/// `(raw, refined)` boundary pairs for every raw proposal that is positive
/// or incomplete, both measured against the groundtruth the raw proposal matches.
pub fn boundary_pairs(
    raw: &[TemporalInterval],
    refined: &[TemporalInterval],
    gts: &[GroundTruthInstance],
) -> (Vec<BoundaryPair>, Vec<BoundaryPair>) {
    let mut before = Vec::new();
    let mut after = Vec::new();
    for (p, r) in raw.iter().zip(refined) {
        let label = label_proposal(p, gts);
        if let (ProposalKind::Positive | ProposalKind::Incomplete, Some(g)) = (label.kind, label.matched_gt) {
            before.push((*p, gts[g].interval));
            after.push((*r, gts[g].interval));
        }
    }
    (before, after)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub train_videos: usize,
    pub test_videos: usize,
    pub rn_loss_first: f64,
    pub rn_loss_last: f64,
    pub ln_loss_first: f64,
    pub ln_loss_last: f64,
    /// Mean absolute boundary error of raw and refined test proposals.
    pub raw_boundary_error: f64,
    pub refined_boundary_error: f64,
    pub matched_proposals: usize,
    pub thresholds: Vec<f64>,
    pub map: Vec<f64>,
}

impl PipelineSummary {
    /// Relative reduction of boundary error achieved by refinement.
    pub fn boundary_reduction(&self) -> f64 {
        if self.raw_boundary_error == 0.0 {
            return 0.0;
        }
        1.0 - self.refined_boundary_error / self.raw_boundary_error
    }
}

pub struct PipelineOutcome {
    pub proposals: Vec<VideoItems>,
    pub refined: Vec<VideoItems>,
    pub detections: Vec<VideoItems>,
    pub rn: RnModel,
    pub ln: LnModel,
    pub rn_curve: Vec<f64>,
    pub ln_curve: LnCurve,
    pub report: EvalReport,
    pub summary: PipelineSummary,
}

/// Runs all phases. Proposals, refinements and detections in the outcome
/// cover the held-out videos only.
pub fn run_pipeline(videos: &[VideoData], classes: &[String], cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let (train_idx, test_idx) = split(videos.len(), cfg.train_fraction)?;
    let train: Vec<&VideoData> = videos[train_idx.clone()].iter().collect();
    let test = &videos[test_idx];
    let k = classes.len();

    let proposals: Vec<VideoItems> = videos.par_iter().map(|v| propose(v, &cfg.actionness)).collect();
    let (train_props, test_props) = proposals.split_at(train_idx.end);
    info!(
        "actionness: {} proposals over {} videos",
        proposals.iter().map(|p| p.items.len()).sum::<usize>(),
        videos.len()
    );

    let rn_pools = rn_training_pools(&train, train_props, cfg);
    let (rn, rn_curve) = train_refinement(&train, &rn_pools, cfg)?;

    let refine_videos = |vs: &[&VideoData], props: &[VideoItems]| -> Result<Vec<VideoItems>> {
        vs.iter()
            .zip(props)
            .map(|(v, p)| refine_items(&rn, v, p, &cfg.units))
            .collect()
    };
    let train_refined = refine_videos(&train, train_props)?;
    let test_refs: Vec<&VideoData> = test.iter().collect();
    let test_refined = refine_videos(&test_refs, test_props)?;

    let ln_pools = ln_training_pools(&train, &train_refined, cfg);
    let (ln, ln_curve) = train_localization(&train, &ln_pools, k, cfg)?;

    let detections: Vec<VideoItems> = test
        .iter()
        .zip(&test_refined)
        .map(|(v, p)| {
            let dets = localize(&ln, v, &p.intervals(), &cfg.units, cfg.detect_nms)?;
            Ok(VideoItems::from_detections(&v.annotation.video_id, &dets))
        })
        .collect::<Result<_>>()?;

    let gts: Vec<_> = test.iter().map(|v| v.annotation.ground_truth()).collect();
    let dets: Vec<VideoDetections> = detections.iter().map(|d| d.detections()).collect::<Result<_>>()?;
    let report = map_at(&dets, &gts, classes, &cfg.thresholds)?;

    let mut before = Vec::new();
    let mut after = Vec::new();
    for ((v, raw), refined) in test.iter().zip(test_props).zip(&test_refined) {
        let (b, a) = boundary_pairs(&raw.intervals(), &refined.intervals(), &v.annotation.instances);
        before.extend(b);
        after.extend(a);
    }

    let summary = PipelineSummary {
        train_videos: train.len(),
        test_videos: test.len(),
        rn_loss_first: rn_curve.first().copied().unwrap_or(0.0),
        rn_loss_last: rn_curve.last().copied().unwrap_or(0.0),
        ln_loss_first: ln_curve.total.first().copied().unwrap_or(0.0),
        ln_loss_last: ln_curve.total.last().copied().unwrap_or(0.0),
        raw_boundary_error: mean_boundary_error(&before),
        refined_boundary_error: mean_boundary_error(&after),
        matched_proposals: before.len(),
        thresholds: report.thresholds.clone(),
        map: report.map.clone(),
    };
    Ok(PipelineOutcome {
        proposals: test_props.to_vec(),
        refined: test_refined,
        detections,
        rn,
        ln,
        rn_curve,
        ln_curve,
        report,
        summary,
    })
}

/// Writes every artifact of a run into `dir`. Nothing time-dependent is
/// recorded, so equal runs produce equal files.
pub fn write_outcome(dir: &Path, outcome: &PipelineOutcome, classes: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| EtpError::io(dir, e))?;
    save_items(&dir.join("proposals.json"), &outcome.proposals, classes)?;
    save_items(&dir.join("refined.json"), &outcome.refined, classes)?;
    save_items(&dir.join("detections.json"), &outcome.detections, classes)?;
    save_checkpoint(&dir.join("rn.etpm"), ModelKind::Refinement, &outcome.rn)?;
    save_checkpoint(&dir.join("ln.etpm"), ModelKind::Localization, &outcome.ln)?;
    write_json(&dir.join("report.json"), &outcome.report)?;
    write_json(&dir.join("summary.json"), &outcome.summary)?;
    std::fs::write(dir.join("report.txt"), outcome.report.table()).map_err(|e| EtpError::io(dir.join("report.txt"), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_holds_out_the_tail() {
        assert_eq!(split(40, 0.75).unwrap(), (0..30, 30..40));
        assert_eq!(split(2, 0.99).unwrap(), (0..1, 1..2));
        assert!(split(1, 0.5).is_err());
    }

    #[test]
    fn windows_tile_at_half_stride() {
        let w = sliding_windows(10, &[4, 20]);
        let spans: Vec<_> = w.iter().map(|i| (i.start(), i.end())).collect();
        assert_eq!(spans, vec![(0, 4), (2, 6), (4, 8), (6, 10)]);
    }

    #[test]
    fn boundary_pairs_share_the_raw_match() {
        let iv = |s, e| TemporalInterval::new(s, e).unwrap();
        let gts = [GroundTruthInstance {
            interval: iv(10, 30),
            label: 0,
        }];
        let raw = [iv(9, 31), iv(100, 120)];
        let refined = [iv(10, 30), iv(10, 30)];
        let (b, a) = boundary_pairs(&raw, &refined, &gts);
        assert_eq!(b, vec![(iv(9, 31), iv(10, 30))]);
        assert_eq!(a, vec![(iv(10, 30), iv(10, 30))]);
        assert_eq!(mean_boundary_error(&b), 1.0);
    }

    #[test]
    fn profiles_validate() {
        PipelineConfig::profile(Profile::Desk).validate().unwrap();
        PipelineConfig::profile(Profile::Paper).validate().unwrap();
        let desk = PipelineConfig::default();
        assert!(desk.rn_train.iterations <= 2_000 && desk.ln_train.iterations <= 2_000);
        assert_eq!(PipelineConfig::profile(Profile::Paper).actionness.nms_threshold, 0.36);
    }
}
