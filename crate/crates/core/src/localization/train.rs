use log::{debug, warn};
use rand::seq::index::sample;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{LnInput, LnModel, LnOutput};
use crate::error::{EtpError, Result};
use crate::refinement::units::{regression_target, RegressionTarget, UnitConfig};
use crate::tensor::ops::{cross_entropy, hinge, smooth_l1_grad_scalar, smooth_l1_scalar};
use crate::tensor::{LrSchedule, Module, Sgd, Tensor};
use crate::timeline::{label_proposal, GroundTruthInstance, ProposalKind, TemporalInterval};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(EtpError::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// `L_cls + α L_comp + β L_loc`
pub fn multitask_loss(cls: f64, comp: f64, loc: f64, w: &LossWeights) -> f64 {
    cls + w.alpha * comp + w.beta * loc
}

/// A labeled proposal ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct LnSample {
    pub input: LnInput,
    pub kind: ProposalKind,
    /// Matched class for positives and incompletes, `K` for background.
    pub class: usize,
    /// Offsets to the matched groundtruth; zero for background.
    pub target: RegressionTarget,
}

/// Labels proposals against the groundtruth and keeps positives,
/// incompletes and backgrounds.
pub fn ln_samples(
    features: &Tensor,
    proposals: &[TemporalInterval],
    gts: &[GroundTruthInstance],
    units: &UnitConfig,
    num_classes: usize,
) -> Result<Vec<LnSample>> {
    let mut out = Vec::new();
    for p in proposals {
        let label = label_proposal(p, gts);
        let (class, target) = match (label.kind, label.matched_gt) {
            (ProposalKind::Ignored, _) => continue,
            (ProposalKind::Background, _) | (_, None) => (num_classes, RegressionTarget::default()),
            (_, Some(g)) => (gts[g].label, regression_target(&gts[g].interval, p)),
        };
        out.push(LnSample {
            input: LnInput::new(features, p, units)?,
            kind: label.kind,
            class,
            target,
        });
    }
    Ok(out)
}

/// Indices into `losses` of the top quarter (rounded up) by loss; ties go
/// to the lower index. Returned in ascending index order.
pub fn ohem_keep(losses: &[f64]) -> Vec<usize> {
    let keep = losses.len().div_ceil(4);
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    order
}

/// Draws `4 * num_pos` incompletes without replacement (all of them when the
/// pool is smaller), in ascending pool order.
pub fn draw_incompletes<R: Rng + ?Sized>(num_pos: usize, pool: &[usize], rng: &mut R) -> Vec<usize> {
    let want = 4 * num_pos;
    if pool.len() <= want {
        return pool.to_vec();
    }
    let mut picked: Vec<usize> = sample(rng, pool.len(), want).into_iter().collect();
    picked.sort_unstable();
    picked.into_iter().map(|i| pool[i]).collect()
}

/// The completeness batch: every positive plus the hardest quarter of the
/// drawn incompletes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OhemBatch {
    pub positives: Vec<usize>,
    pub incompletes: Vec<usize>,
}

/// `loss_of(i)` is the completeness loss of incomplete `i`.
pub fn ohem_sample<R: Rng + ?Sized>(
    positives: &[usize],
    incompletes: &[usize],
    loss_of: impl Fn(usize) -> f64,
    rng: &mut R,
) -> OhemBatch {
    if incompletes.is_empty() {
        warn!("no incomplete proposals available; completeness batch has positives only");
    }
    let drawn = draw_incompletes(positives.len(), incompletes, rng);
    let losses: Vec<f64> = drawn.iter().map(|&i| loss_of(i)).collect();
    OhemBatch {
        positives: positives.to_vec(),
        incompletes: ohem_keep(&losses).into_iter().map(|k| drawn[k]).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LnTrainConfig {
    /// Proposals drawn per iteration, split 1:1:4 between positives,
    /// backgrounds and incompletes.
    pub batch_size: usize,
    pub iterations: usize,
    pub momentum: f64,
    pub schedule: LrSchedule,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for LnTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            iterations: 90_000,
            momentum: 0.9,
            schedule: LrSchedule {
                base: 0.1,
                decay: 0.1,
                every: 5_000,
                floor: Some(1e-5),
            },
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl LnTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(EtpError::invalid("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(EtpError::invalid("momentum must lie in [0,1)"));
        }
        self.weights.validate()?;
        self.schedule.validate()
    }

    pub fn positives_per_batch(&self) -> usize {
        (self.batch_size / 6).max(1)
    }
}

/// Per-iteration loss components.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LnCurve {
    pub total: Vec<f64>,
    pub cls: Vec<f64>,
    pub comp: Vec<f64>,
    pub loc: Vec<f64>,
}

/// Indices of one iteration's sampled proposals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LnBatch {
    pub positives: Vec<usize>,
    pub backgrounds: Vec<usize>,
    pub incompletes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LnLosses {
    pub cls: f64,
    pub comp: f64,
    pub loc: f64,
    pub total: f64,
}

/// Forward and backward over one batch; gradients accumulate in `model`.
/// Classification uses positives and backgrounds, completeness uses
/// positives and the hardest quarter of the incompletes, regression uses
/// positives.
pub fn ln_batch_gradients<R: Rng + ?Sized>(
    model: &mut LnModel,
    samples: &[LnSample],
    batch: &LnBatch,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<LnLosses> {
    let drawn = draw_incompletes(batch.positives.len(), &batch.incompletes, rng);
    let members: Vec<usize> = batch
        .positives
        .iter()
        .chain(&batch.backgrounds)
        .chain(&drawn)
        .copied()
        .collect();
    let inputs: Vec<&LnInput> = members.iter().map(|&i| &samples[i].input).collect();
    let (out, cache) = model.forward(&inputs)?;
    let n_pos = batch.positives.len();
    let n_cls = n_pos + batch.backgrounds.len();
    let k1 = out.logits.cols();

    let mut grads = LnOutput {
        logits: Tensor::zeros(out.logits.shape()),
        completeness: Tensor::zeros(out.completeness.shape()),
        offsets: Tensor::zeros(out.offsets.shape()),
    };

    // classification
    let cls_logits = Tensor::matrix(n_cls, k1, out.logits.data()[..n_cls * k1].to_vec())?;
    let labels: Vec<usize> = members[..n_cls].iter().map(|&i| samples[i].class).collect();
    let (cls, d_cls) = cross_entropy(&cls_logits, &labels)?;
    grads.logits.data_mut()[..n_cls * k1].copy_from_slice(d_cls.data());

    // completeness with OHEM over the drawn incompletes
    let comp_out = out.completeness.data();
    let inc_losses: Vec<f64> = (0..drawn.len()).map(|k| (1.0 + comp_out[n_cls + k]).max(0.0)).collect();
    let kept: Vec<usize> = ohem_keep(&inc_losses).into_iter().map(|k| n_cls + k).collect();
    let comp_rows: Vec<usize> = (0..n_pos).chain(kept).collect();
    let preds: Vec<f64> = comp_rows.iter().map(|&r| comp_out[r]).collect();
    let signs: Vec<f64> = comp_rows.iter().map(|&r| if r < n_pos { 1.0 } else { -1.0 }).collect();
    let (comp, d_comp) = hinge(&preds, &signs)?;
    for (&r, g) in comp_rows.iter().zip(d_comp) {
        grads.completeness.data_mut()[r] = weights.alpha * g;
    }

    // regression on positives
    let mut loc = 0.0;
    if n_pos > 0 {
        let inv = 1.0 / n_pos as f64;
        for (row, &i) in batch.positives.iter().enumerate() {
            let t = samples[i].target;
            let o = out.offsets.row(row);
            let (dc, ds) = (o[0] - t.c, o[1] - t.s);
            loc += smooth_l1_scalar(dc) + smooth_l1_scalar(ds);
            let g = grads.offsets.row_mut(row);
            g[0] = weights.beta * inv * smooth_l1_grad_scalar(dc);
            g[1] = weights.beta * inv * smooth_l1_grad_scalar(ds);
        }
        loc *= inv;
    }

    model.backward(&cache, &grads)?;
    Ok(LnLosses {
        cls,
        comp,
        loc,
        total: multitask_loss(cls, comp, loc, weights),
    })
}

/// SGD with momentum on the multi-task loss.
pub fn train_ln(model: &mut LnModel, samples: &[LnSample], cfg: &LnTrainConfig) -> Result<LnCurve> {
    cfg.validate()?;
    let pool = |kind: ProposalKind| -> Vec<usize> {
        samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == kind)
            .map(|(i, _)| i)
            .collect()
    };
    let positives = pool(ProposalKind::Positive);
    let backgrounds = pool(ProposalKind::Background);
    let incompletes = pool(ProposalKind::Incomplete);
    if positives.is_empty() {
        return Err(EtpError::InsufficientData(
            "no positive proposals to train the localization network".into(),
        ));
    }
    if backgrounds.is_empty() {
        warn!("no background proposals; classification trains on positives only");
    }
    if incompletes.is_empty() {
        warn!("no incomplete proposals; completeness trains on positives only");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.momentum, cfg.schedule);
    let per_kind = cfg.positives_per_batch();
    let mut curve = LnCurve::default();
    let draw = |pool: &[usize], rng: &mut ChaCha8Rng| -> Vec<usize> {
        if pool.is_empty() {
            return Vec::new();
        }
        (0..per_kind).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    };

    for it in 0..cfg.iterations {
        let batch = LnBatch {
            positives: draw(&positives, &mut rng),
            backgrounds: draw(&backgrounds, &mut rng),
            incompletes: incompletes.clone(),
        };
        model.zero_grad();
        let losses = ln_batch_gradients(model, samples, &batch, &cfg.weights, &mut rng)?;
        opt.step(model, it)?;
        if it % 100 == 0 {
            debug!(
                "ln iteration {it}: loss {:.5} (cls {:.5}, comp {:.5}, loc {:.5})",
                losses.total, losses.cls, losses.comp, losses.loc
            );
        }
        curve.total.push(losses.total);
        curve.cls.push(losses.cls);
        curve.comp.push(losses.comp);
        curve.loc.push(losses.loc);
    }
    Ok(curve)
}
