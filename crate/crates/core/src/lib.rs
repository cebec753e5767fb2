//! Patient-pair contrastive pretraining of ECG encoders, with random or
//! in-distribution (single-cohort) batching, plus the downstream evaluation
//! toolkit: MLP heads, metrics, paired statistical tests and cohort probes.

pub mod contrastive;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod rng;
pub mod signal;
pub mod syncohort;

pub use error::{Error, Result};
