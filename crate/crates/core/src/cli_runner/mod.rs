//! Experiment orchestration: configuration, named suites and report emission.

pub mod config;
pub mod report;
pub mod suites;

pub use config::ExperimentConfig;
pub use report::{emit, CriterionResult, PlotData, Report};
pub use suites::{run_suite, suite_criteria, SuiteOutput, CRITERIA};
