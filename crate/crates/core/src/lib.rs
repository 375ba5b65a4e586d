//! Warm-started Bayesian hyperparameter optimization.
//!
//! The crate bundles a Gaussian-process optimizer ([`bho`]), baseline initial
//! designs ([`sampling`]), a Siamese metric learner that embeds whole datasets
//! into meta-features whose Euclidean distances track the L1 distance between
//! their evaluation histories ([`metafeature`]), and a synthetic task-family
//! benchmark that exercises the whole pipeline ([`synthbench`]).

pub mod acquisition;
pub mod bho;
pub mod gp;
pub mod history;
pub mod hyperspace;
pub mod metafeature;
pub mod rng;
pub mod sampling;
pub mod synthbench;
