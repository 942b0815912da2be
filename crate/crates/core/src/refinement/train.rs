use std::collections::BTreeMap;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{sequence_of, RnModel};
use super::units::{
    apply_offsets, crop_units, regression_target, snap_to_grid, unit_matrix, RegressionTarget, UnitConfig,
};
use crate::error::{EtpError, Result};
use crate::tensor::ops::{smooth_l1_grad_scalar, smooth_l1_scalar};
use crate::tensor::{LrSchedule, Module, Sgd, Tensor};
use crate::timeline::{label_proposal, GroundTruthInstance, ProposalKind, TemporalInterval};

/// One regression example: the unit features of a grid-snapped anchor and
/// the offsets from that anchor to the matched groundtruth.
#[derive(Debug, Clone, PartialEq)]
pub struct RnSample {
    pub anchor: TemporalInterval,
    pub units: Tensor,
    pub target: RegressionTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RnTrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub momentum: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for RnTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            iterations: 20_000,
            momentum: 0.9,
            schedule: LrSchedule {
                base: 0.1,
                decay: 0.1,
                every: 5_000,
                floor: None,
            },
            seed: 0,
        }
    }
}

impl RnTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(EtpError::invalid("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(EtpError::invalid("momentum must lie in [0,1)"));
        }
        self.schedule.validate()
    }
}

/// Builds examples from the positive and incomplete proposals of one video.
/// Each proposal regresses toward its best-overlapping groundtruth.
pub fn rn_samples(
    features: &Tensor,
    proposals: &[TemporalInterval],
    gts: &[GroundTruthInstance],
    units: &UnitConfig,
) -> Vec<RnSample> {
    let num_frames = features.rows();
    proposals
        .iter()
        .filter_map(|p| {
            let label = label_proposal(p, gts);
            if !matches!(label.kind, ProposalKind::Positive | ProposalKind::Incomplete) {
                return None;
            }
            let gt = &gts[label.matched_gt?].interval;
            let anchor = snap_to_grid(p, units.stride, num_frames);
            let cropped = crop_units(&anchor, units.unit_len, units.stride, num_frames);
            Some(RnSample {
                anchor,
                units: unit_matrix(features, &cropped),
                target: regression_target(gt, &anchor),
            })
        })
        .collect()
}

/// Mean over samples of `smooth_l1(Δc) + smooth_l1(Δs)`.
pub fn regression_loss(preds: &[RegressionTarget], targets: &[RegressionTarget]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds
        .iter()
        .zip(targets)
        .map(|(p, t)| smooth_l1_scalar(p.c - t.c) + smooth_l1_scalar(p.s - t.s))
        .sum::<f64>()
        / preds.len() as f64
}

/// Minibatch SGD on the regression loss. Returns the loss of every iteration.
pub fn train_rn(model: &mut RnModel, samples: &[RnSample], cfg: &RnTrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(EtpError::InsufficientData(
            "no positive or incomplete proposals to train the refinement network".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.momentum, cfg.schedule);
    let batch = cfg.batch_size.min(samples.len());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut curve = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        model.zero_grad();
        let loss = batch_step(model, samples, &picked)?;
        opt.step(model, it)?;
        if it % 100 == 0 {
            debug!("rn iteration {it}: loss {loss:.6}");
        }
        curve.push(loss);
    }
    Ok(curve)
}

/// Forward and backward over one minibatch, grouping samples of equal unit
/// count into batched passes. Returns the batch loss.
fn batch_step(model: &mut RnModel, samples: &[RnSample], picked: &[usize]) -> Result<f64> {
    let scale = 1.0 / picked.len() as f64;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in picked {
        groups.entry(samples[i].units.rows()).or_default().push(i);
    }
    let mut loss = 0.0;
    for members in groups.values() {
        let mats: Vec<Tensor> = members.iter().map(|&i| samples[i].units.clone()).collect();
        let seq = sequence_of(&mats)?;
        let (out, cache) = model.forward_batch(&seq)?;
        let mut d_out = Tensor::zeros(out.shape());
        for (row, &i) in members.iter().enumerate() {
            let t = samples[i].target;
            let dc = out.row(row)[0] - t.c;
            let ds = out.row(row)[1] - t.s;
            loss += smooth_l1_scalar(dc) + smooth_l1_scalar(ds);
            let g = d_out.row_mut(row);
            g[0] = scale * smooth_l1_grad_scalar(dc);
            g[1] = scale * smooth_l1_grad_scalar(ds);
        }
        model.backward_batch(&cache, &d_out)?;
    }
    Ok(loss * scale)
}

/// Snaps `p` to the unit grid, predicts offsets from its units and applies
/// them to the snapped anchor.
pub fn refine_proposal(
    model: &RnModel,
    features: &Tensor,
    p: &TemporalInterval,
    units: &UnitConfig,
) -> Result<TemporalInterval> {
    let num_frames = features.rows();
    let anchor = snap_to_grid(p, units.stride, num_frames);
    let cropped = crop_units(&anchor, units.unit_len, units.stride, num_frames);
    let offsets = model.predict(&unit_matrix(features, &cropped))?;
    Ok(apply_offsets(&anchor, &offsets, num_frames))
}

/// [`refine_proposal`] over many proposals in parallel, preserving order.
pub fn refine_all(
    model: &RnModel,
    features: &Tensor,
    proposals: &[TemporalInterval],
    units: &UnitConfig,
) -> Result<Vec<TemporalInterval>> {
    proposals
        .par_iter()
        .map(|p| refine_proposal(model, features, p, units))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refinement::model::RnConfig;
    use rand::RngExt;

    fn iv(s: usize, e: usize) -> TemporalInterval {
        TemporalInterval::new(s, e).unwrap()
    }

    fn plateau_features(num_frames: usize, span: TemporalInterval, dim: usize) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..num_frames)
            .map(|t| {
                let inside = span.start() <= t && t < span.end();
                (0..dim)
                    .map(|d| if inside { 1.0 - 0.1 * d as f64 } else { 0.0 })
                    .collect()
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    fn small_cfg(iterations: usize, seed: u64) -> RnTrainConfig {
        RnTrainConfig {
            batch_size: 16,
            iterations,
            momentum: 0.9,
            schedule: LrSchedule {
                base: 0.05,
                decay: 0.1,
                every: 100_000,
                floor: None,
            },
            seed,
        }
    }

    #[test]
    fn samples_keep_only_positive_and_incomplete() {
        let gt = GroundTruthInstance {
            interval: iv(40, 104),
            label: 0,
        };
        let f = plateau_features(200, gt.interval, 3);
        let units = UnitConfig::with_len(16);
        let proposals = [iv(39, 105), iv(40, 70), iv(150, 190), iv(60, 150)];
        let samples = rn_samples(&f, &proposals, &[gt], &units);
        // positive, incomplete (30/64), background, incomplete (44/110)
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[0].anchor, iv(40, 104));
        assert_eq!(samples[0].target, RegressionTarget::default());
        assert!(samples.iter().all(|s| s.anchor.start() % 8 == 0));
    }

    #[test]
    fn zero_targets_and_zero_head_give_zero_loss() {
        let gt = GroundTruthInstance {
            interval: iv(16, 48),
            label: 0,
        };
        let f = plateau_features(64, gt.interval, 2);
        let samples = rn_samples(&f, &[gt.interval], &[gt], &UnitConfig::with_len(16));
        let mut model = RnModel::zeros(&RnConfig {
            input_dim: 2,
            hidden: 3,
            depth: 2,
        });
        let curve = train_rn(&mut model, &samples, &small_cfg(1, 0)).unwrap();
        assert_eq!(curve, vec![0.0]);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let mut model = RnModel::zeros(&RnConfig::new(2));
        let err = train_rn(&mut model, &[], &small_cfg(1, 0)).unwrap_err();
        assert!(err.to_string().contains("no positive or incomplete"));
    }

    #[test]
    fn single_sample_overfits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gt = GroundTruthInstance {
            interval: iv(37, 101),
            label: 0,
        };
        let f = plateau_features(160, gt.interval, 4);
        let samples = rn_samples(&f, &[iv(30, 110)], &[gt], &UnitConfig::with_len(16));
        assert_eq!(samples.len(), 1);
        let mut model = RnModel::new(
            &RnConfig {
                input_dim: 4,
                hidden: 8,
                depth: 2,
            },
            &mut rng,
        );
        let curve = train_rn(&mut model, &samples, &small_cfg(500, 3)).unwrap();
        assert!(*curve.last().unwrap() < 1e-3, "final loss {}", curve.last().unwrap());
        let pred = model.predict(&samples[0].units).unwrap();
        let t = samples[0].target;
        assert!((pred.c - t.c).abs() < 0.05 && (pred.s - t.s).abs() < 0.05);
    }

    #[test]
    fn moving_average_loss_does_not_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let units = UnitConfig::with_len(16);
        let mut samples = Vec::new();
        for _ in 0..12 {
            let start = rng.random_range(20..60);
            let len = rng.random_range(40..90);
            let gt = GroundTruthInstance {
                interval: iv(start, start + len),
                label: 0,
            };
            let f = plateau_features(200, gt.interval, 4);
            let jitter = |v: usize, r: &mut ChaCha8Rng| v + r.random_range(0..7) - 3;
            let p = iv(jitter(start, &mut rng), jitter(start + len, &mut rng));
            samples.extend(rn_samples(&f, &[p], &[gt], &units));
        }
        let mut model = RnModel::new(
            &RnConfig {
                input_dim: 4,
                hidden: 8,
                depth: 2,
            },
            &mut rng,
        );
        let curve = train_rn(&mut model, &samples, &small_cfg(600, 5)).unwrap();
        let blocks: Vec<f64> = curve
            .chunks(100)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        for w in blocks.windows(2) {
            assert!(w[1] <= w[0], "block means {blocks:?}");
        }
        assert!(blocks.last().unwrap() < &blocks[0]);
    }

    #[test]
    fn refine_applies_prediction_to_snapped_anchor() {
        let model = RnModel::zeros(&RnConfig {
            input_dim: 2,
            hidden: 2,
            depth: 1,
        });
        let f = Tensor::zeros(&[100, 2]);
        let units = UnitConfig::with_len(16);
        let out = refine_all(&model, &f, &[iv(9, 41), iv(3, 30)], &units).unwrap();
        assert_eq!(out, vec![iv(8, 40), iv(0, 32)]);
    }
}
