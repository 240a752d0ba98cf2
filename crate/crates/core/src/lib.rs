//! Cross-domain label-noise refinement for multi-domain classification data.
//!
//! The pipeline trains a small featurizer, splits samples by per-sample loss
//! with a two-component Gaussian mixture, averages low-loss embeddings into
//! (class, domain) proxies and relabels high-loss samples by their mean
//! cosine distance to each class's proxies in the *other* domains.
//!
//! Supporting modules generate synthetic multi-domain data with pairwise
//! label noise, provide ELR and SWAD baselines, and run leave-one-domain-out
//! evaluations and noise sweeps.

pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod loss_split;
pub mod model;
pub mod numerics;
pub mod relabel;
pub mod trainer;

pub use error::{Error, Result};

/// Stable identifier of a sample within a dataset.
pub type SampleId = u64;
