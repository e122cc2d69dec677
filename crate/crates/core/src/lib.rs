//! Attention-based cardinality estimation for set-valued queries.
//!
//! The crate is organised bottom-up:
//!
//! * [`corpus`] loads and indexes a set-valued dataset.
//! * [`queries`] defines superset/subset/overlap predicates, the exact
//!   cardinality oracle, workload generation and the Q-error metric.
//! * [`tensor`] is a small dense 2-D tensor engine with reverse-mode
//!   differentiation, attention layers and Adam.
//! * [`encoder`] condenses the corpus into a compact distilled matrix.
//! * [`analyzer`] maps a query plus the distilled matrix to an estimate.
//! * [`baselines`] holds the independence and sampling estimators.
//! * [`dynamic`] applies inserts and deletes while keeping the distilled
//!   matrix and frequency statistics consistent.
//! * [`harness`] drives benchmarks, synthetic corpora and configuration.
//!
//! Data-parallel loops go through [`par`], which falls back to sequential
//! iteration when the `parallel` feature is disabled.

pub mod analyzer;
pub mod baselines;
pub mod corpus;
pub mod dynamic;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod par;
pub mod queries;
pub mod tensor;

pub use error::{Error, Result};
