//! Attention-guided global/local/fusion classification.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`gradcore`]: tensors, a tape-based reverse-mode autodiff engine, SGD.
//! * [`attention`]: heat maps from convolutional features, threshold masks,
//!   largest connected region, crop-and-resize.
//! * [`model`]: global and local branches, fusion head, checkpoints.
//! * [`trainer`]: staged training and the alternative training orders.
//! * [`data`]: manifests, splits, augmentation, synthetic lesion images.
//! * [`metrics`]: ROC curves, AUC and per-branch reports.
//! * [`cli`]: the `agcnn` command-line front end.
//!
//! The guide under `book/` walks through each stage; its code listings are
//! compiled and run as doc-tests of this crate.

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcore;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book;
