//! Synthetic benchmark: task-family generator, experiment suites, reports
//! and metrics.

pub mod experiments;
pub mod family;
pub mod metrics;
pub mod report;

pub use experiments::{BenchConfig, Experiment, Lab, Method, TrainSettings, TrainSize};
pub use family::{generate_task_family, TaskFamily, TaskFamilyConfig};
pub use report::{ContinualReport, ExperimentReport, ReportSummary};
