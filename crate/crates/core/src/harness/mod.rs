//! Verification harness: configuration, oracles, scenarios and reports.

pub mod config;
pub mod io;
pub mod oracle;
pub mod report;
pub mod scenarios;

pub use config::{DriftSpec, ExperimentConfig, InitialSpec, Scenario};
pub use oracle::{oracle_constrained_min, ConstraintKind, ConstraintSpec, OracleResult};
pub use io::{path_json, read_drift, read_measure, read_path, write_kernel_dump, write_measure, write_path, StepSummary};
pub use report::{emit_report, read_reports, to_json, Check, ReportFormat, ScenarioReport};
pub use scenarios::{appendix_oracles, run_experiment, run_scenario, AppendixKind, ExperimentOutput};
