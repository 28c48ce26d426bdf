//! Benchmark harness around `latentkf`: dataset generation, training of the
//! four filter variants, evaluation in dB, latency measurement and plots.

pub mod cache;
pub mod config;
pub mod latency;
pub mod plot;
pub mod report;
pub mod runner;
pub mod study;

pub use config::{ExperimentConfig, Mismatch, ModelKind, OptimizerChoice, Scale, Variant};
pub use report::MetricRecord;
