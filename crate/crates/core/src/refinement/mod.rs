//! Boundary refinement: proposals are cropped into context-augmented units,
//! encoded by a bidirectional GRU, and regressed to center/log-span offsets.

pub mod gru;
pub mod model;
pub mod train;
pub mod units;

pub use model::{RnConfig, RnModel};
pub use train::{refine_all, refine_proposal, rn_samples, train_rn, RnSample, RnTrainConfig};
pub use units::{
    apply_offsets, crop_units, regression_target, snap_to_grid, unit_feature, RegressionTarget, Unit, UnitConfig,
};
