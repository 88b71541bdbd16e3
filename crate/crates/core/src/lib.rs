//! Semi-supervised 3D point-cloud classification.
//!
//! The crate bundles everything needed to train a small point classifier from
//! a handful of labelled clouds plus a large unlabelled pool: synthetic data
//! and its binary format, augmentation policies, a reverse-mode gradient
//! engine, the encoder/classifier model, the loss terms (pseudo-label
//! cross-entropy, inverse top-k learning, unsupervised and supervised
//! contrastive losses), adaptive hard augmentation driven by per-sample loss
//! history, the training loop and the metrics it emits.

pub mod aha;
pub mod augment;
pub mod error;
pub mod graph;
pub mod invlearn;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pcdata;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
