//! Statistical models of tropical-cyclone intensity evolution driven by the
//! storm environment: linear regression, finite mixture regression and a
//! covariate-dependent hidden Markov model, with an over-land decay model, a
//! Monte Carlo ensemble simulator and climatology metrics.

// `!(x > 0.0)` is the NaN-rejecting form used throughout validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod domain;
pub mod error;
pub mod evaluate;
pub mod fsutil;
pub mod hmm;
pub mod ingest;
pub mod landdecay;
pub mod mixture;
pub mod model;
pub mod rng;
pub mod simulate;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};
