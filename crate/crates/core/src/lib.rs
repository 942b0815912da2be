//! Temporal action localization with grouped actionness proposals, recurrent boundary refinement and non-local classification.
//!
//! The pipeline runs in three phases over precomputed per-frame data:
//!
//! 1. [`actionness`] grows class-score tracks into initial proposals.
//! 2. [`refinement`] crops proposals into context-augmented units, encodes
//!    them with a bidirectional GRU and regresses coarse boundary offsets.
//! 3. [`localization`] pools stage-augmented non-local pyramid features and
//!    trains classification, completeness and regression heads jointly.
//!
//! [`evaluation`] scores detections with per-class AP over IoU thresholds,
//! [`io`] owns file formats and the synthetic data generator, and
//! [`pipeline`] chains everything for the command-line front end in [`cli`].

pub mod actionness;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod localization;
pub mod pipeline;
pub mod refinement;
pub mod tensor;
pub mod timeline;

pub use error::{EtpError, Result};
