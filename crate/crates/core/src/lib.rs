//! Open-vocabulary multi-object tracking at the embedding level.
//!
//! The crate covers box geometry, prompt-guided attention weights for
//! detection training, self-supervised association losses with an analytic
//! gradient, long-short sampling and clustering, an online tracker,
//! TETA-style evaluation, and a synthetic scenario generator used by the
//! `ovmot` command line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod numeric;
pub mod prompt;
pub mod sampler;
pub mod ssl;
pub mod synth;
pub mod tracker;

pub use error::{Error, Result};
