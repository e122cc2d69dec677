//! Benchmark engine, synthetic corpora and run configuration.

mod bench;
mod config;
mod synth;

pub use bench::{bench, nearest_rank, BenchReport, ClassStats, Entrant, EstimatorReport, WARMUP_CALLS};
pub use config::{Config, WorkloadConfig};
pub use synth::{synth_corpus, SynthSpec};
