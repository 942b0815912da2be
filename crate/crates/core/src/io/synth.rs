//! Synthetic datasets with planted actions. Each class has a fixed feature
//! signature and a score track that is the action indicator plus clipped
//! Gaussian noise.

use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::documents::{class_vocabulary, load_annotations, save_annotations, VideoAnnotation};
use super::features::{read_matrix, write_feature_file, FeatureKind};
use crate::actionness::ScoreTrack;
use crate::error::{EtpError, Result};
use crate::tensor::Tensor;
use crate::timeline::{GroundTruthInstance, TemporalInterval};

pub const SYNTH_FPS: f64 = 30.0;
const PLACEMENT_RETRIES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub num_frames: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Inclusive range of actions per video.
    pub actions_per_video: (usize, usize),
    /// Inclusive range of action lengths in frames.
    pub action_len: (usize, usize),
    /// Minimum number of background frames between two actions.
    pub min_gap: usize,
    /// Standard deviation of the score noise.
    pub score_noise: f64,
    /// Ratio of the class-signature scale to the feature noise deviation.
    pub feature_snr: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 40,
            num_frames: 512,
            num_classes: 3,
            feature_dim: 16,
            actions_per_video: (2, 4),
            action_len: (32, 96),
            min_gap: 24,
            score_noise: 0.05,
            feature_snr: 5.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EtpError::invalid(m.to_string()));
        if self.num_videos == 0 || self.num_frames == 0 || self.num_classes == 0 || self.feature_dim == 0 {
            return bad("synthetic videos, frames, classes and feature_dim must be positive");
        }
        let (lo, hi) = self.action_len;
        if lo == 0 || lo > hi || hi > self.num_frames {
            return bad("action length range must lie within (0, num_frames]");
        }
        if self.actions_per_video.0 > self.actions_per_video.1 {
            return bad("actions_per_video range is reversed");
        }
        if !(self.score_noise >= 0.0 && self.score_noise.is_finite()) {
            return bad("score noise must be non-negative");
        }
        if self.feature_snr.is_nan() || self.feature_snr <= 0.0 {
            return bad("feature_snr must be positive");
        }
        Ok(())
    }

    /// Class signature `k`: 0.5 on every dimension plus 1 on the dimensions
    /// congruent to `k` modulo `K`. Background frames have mean zero.
    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        (0..self.feature_dim)
            .map(|d| 0.5 + if d % self.num_classes == class { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|k| format!("class_{k}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoData {
    pub annotation: VideoAnnotation,
    pub features: Tensor,
    pub scores: ScoreTrack,
}

fn place_actions(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<GroundTruthInstance>> {
    let (amin, amax) = cfg.actions_per_video;
    let count = rng.random_range(amin..=amax);
    let mut placed: Vec<GroundTruthInstance> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut ok = None;
        for _ in 0..PLACEMENT_RETRIES {
            let len = rng.random_range(cfg.action_len.0..=cfg.action_len.1);
            let start = rng.random_range(0..=cfg.num_frames - len);
            let cand = TemporalInterval::new(start, start + len)?;
            let clear = placed.iter().all(|p| {
                cand.end() + cfg.min_gap <= p.interval.start() || p.interval.end() + cfg.min_gap <= cand.start()
            });
            if clear {
                ok = Some(cand);
                break;
            }
        }
        let interval = ok.ok_or_else(|| {
            EtpError::invalid(format!(
                "could not place {count} non-overlapping actions in {} frames after {PLACEMENT_RETRIES} retries",
                cfg.num_frames
            ))
        })?;
        placed.push(GroundTruthInstance {
            interval,
            label: rng.random_range(0..cfg.num_classes),
        });
    }
    placed.sort_by_key(|g| g.interval.start());
    Ok(placed)
}

/// Generates the whole dataset. Identical configs give identical output.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<VideoData>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let feature_noise = Normal::new(0.0, 1.0 / cfg.feature_snr).map_err(|e| EtpError::invalid(e.to_string()))?;
    let score_noise = Normal::new(0.0, cfg.score_noise).map_err(|e| EtpError::invalid(e.to_string()))?;
    let means: Vec<Vec<f64>> = (0..cfg.num_classes).map(|k| cfg.class_mean(k)).collect();
    let (t, d, k) = (cfg.num_frames, cfg.feature_dim, cfg.num_classes);
    let mut videos = Vec::with_capacity(cfg.num_videos);
    for v in 0..cfg.num_videos {
        let instances = place_actions(cfg, &mut rng)?;
        let mut owner: Vec<Option<usize>> = vec![None; t];
        for g in &instances {
            owner[g.interval.start()..g.interval.end()].fill(Some(g.label));
        }
        let mut features = Vec::with_capacity(t * d);
        let mut scores = Vec::with_capacity(t * k);
        let background = vec![0.0; d];
        for o in &owner {
            for &mean in o.map_or(&background, |c| &means[c]) {
                features.push(mean + feature_noise.sample(&mut rng));
            }
            for class in 0..k {
                let ind = if *o == Some(class) { 1.0 } else { 0.0 };
                let noise = if cfg.score_noise > 0.0 {
                    score_noise.sample(&mut rng)
                } else {
                    0.0
                };
                // stored as f32 on disk, so round now to keep memory and files identical
                scores.push(((ind + noise).clamp(0.0, 1.0) as f32) as f64);
            }
        }
        let features = features.into_iter().map(|x| (x as f32) as f64).collect();
        videos.push(VideoData {
            annotation: VideoAnnotation {
                video_id: format!("video_{v:04}"),
                num_frames: t,
                fps: SYNTH_FPS,
                classes: cfg.class_names(),
                instances,
            },
            features: Tensor::matrix(t, d, features)?,
            scores: ScoreTrack::new(t, k, scores)?,
        });
    }
    Ok(videos)
}

pub fn features_path(dir: &Path, video_id: &str) -> std::path::PathBuf {
    dir.join("features").join(format!("{video_id}.etpf"))
}

pub fn scores_path(dir: &Path, video_id: &str) -> std::path::PathBuf {
    dir.join("scores").join(format!("{video_id}.etpf"))
}

/// Writes `annotations.json`, `features/<id>.etpf` and `scores/<id>.etpf`.
pub fn write_dataset(dir: &Path, videos: &[VideoData]) -> Result<()> {
    for sub in ["features", "scores"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| EtpError::io(&p, e))?;
    }
    for v in videos {
        let id = &v.annotation.video_id;
        write_feature_file(&features_path(dir, id), &v.features, FeatureKind::Features)?;
        let scores = Tensor::matrix(
            v.scores.num_frames(),
            v.scores.num_classes(),
            v.scores.scores().to_vec(),
        )?;
        write_feature_file(&scores_path(dir, id), &scores, FeatureKind::Scores)?;
    }
    let annotations: Vec<VideoAnnotation> = videos.iter().map(|v| v.annotation.clone()).collect();
    save_annotations(&dir.join("annotations.json"), &annotations)
}

/// Reads a dataset directory laid out by [`write_dataset`], checking that
/// every file agrees with its annotation record.
pub fn read_dataset(dir: &Path) -> Result<Vec<VideoData>> {
    let annotations = load_annotations(&dir.join("annotations.json"))?;
    let classes = class_vocabulary(&annotations)?;
    annotations
        .into_iter()
        .map(|a| {
            let fpath = features_path(dir, &a.video_id);
            let spath = scores_path(dir, &a.video_id);
            let features = read_matrix(&fpath, FeatureKind::Features)?;
            let scores = read_matrix(&spath, FeatureKind::Scores)?;
            if features.rows() != a.num_frames {
                return Err(EtpError::format(
                    &fpath,
                    format!("{} frames, annotation says {}", features.rows(), a.num_frames),
                ));
            }
            if scores.rows() != a.num_frames || scores.cols() != classes.len() {
                return Err(EtpError::format(
                    &spath,
                    format!(
                        "score matrix is {}x{}, expected {}x{}",
                        scores.rows(),
                        scores.cols(),
                        a.num_frames,
                        classes.len()
                    ),
                ));
            }
            let scores = ScoreTrack::new(scores.rows(), scores.cols(), scores.into_data())?;
            Ok(VideoData {
                annotation: a,
                features,
                scores,
            })
        })
        .collect()
}
