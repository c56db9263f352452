//! Distribution-aware semantic pseudo-labeling for class-imbalanced
//! semi-supervised learning, run on synthetic long-tailed Gaussian mixtures.
//!
//! The crate is organized bottom-up:
//!
//! - [`nn`]: a small MLP with hand-derived gradients, SGD and EMA shadowing.
//! - [`datagen`]: long-tailed dataset synthesis and feature-space augmentation.
//! - [`proto_bank`]: balanced per-class feature queues and the cosine classifier.
//! - [`blend`]: the pseudo-label distribution tracker and class-adaptive blending.
//! - [`learner`]: losses and the training step for DASO and the baseline learners.
//! - [`metrics`]: pseudo-label quality, test evaluation and reporting helpers.
//! - [`harness`]: configs, run directories, ablation/sweep suites and reports.
//!
//! Data-parallel inner loops (per-sample gradients, evaluation, suite runs)
//! use rayon when the `parallel` feature is on (default). Reductions always
//! happen in a fixed order, so results are bit-identical with the feature off.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blend;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod learner;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod proto_bank;
pub mod seed;

pub use error::{Error, Result};
