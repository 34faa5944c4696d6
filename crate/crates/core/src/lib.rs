//! Domain-adversarial training of multi-aspect audio quality predictors.
//!
//! The crate bundles a small reverse-mode autodiff engine, the predictor and
//! its Gaussian quality head, domain-labelling strategies, a seeded training
//! loop, and the evaluation utilities (SRCC, paired t-tests, linear probes,
//! PCA projections, granularity sweeps).

pub mod autodiff;
pub mod data;
pub mod domains;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod rng;
pub mod selfcheck;
pub mod train;

pub use error::{Error, Result};
