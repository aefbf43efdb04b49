//! Multi-criteria recommendation with criteria preference-aware light graph
//! convolution.
//!
//! The pipeline runs: [`dataset`] ingestion and binarization, construction of
//! the expansion [`graph`] in which every item is replicated once per
//! criterion, the dual-stack forward pass in [`model`], BPR optimization in
//! [`training`], and top-K ranking plus diagnostics in [`evaluation`].
//! [`baselines`] holds LightGCN and its per-criterion concatenation variant.

pub mod baselines;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod model;
pub mod rng;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
