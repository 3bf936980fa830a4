//! Experiment runner for commercial memorability prediction: grouped nested
//! cross-validation over a gradient-boosted baseline and a fusion
//! transformer, with leakage audits and tabular reports.

pub mod runner;

pub use runner::{
    audit_exemplars, audit_leakage, run_experiment, ExperimentConfig, ExperimentReport, MetricReport, RunnerError,
    Violation, ViolationKind,
};
