//! Final localization: stage-augmented proposals pass through a non-local
//! block and a temporal pyramid into classification, completeness and
//! regression heads.

pub mod detect;
pub mod model;
pub mod nonlocal;
pub mod train;

pub use detect::{decide, per_class_nms, rank_and_detect, Detection};
pub use model::{stage_augment, LnConfig, LnInput, LnModel, StagedProposal};
pub use nonlocal::NonLocalBlock;
pub use train::{
    ln_samples, multitask_loss, ohem_keep, ohem_sample, train_ln, LnCurve, LnSample, LnTrainConfig, LossWeights,
};
