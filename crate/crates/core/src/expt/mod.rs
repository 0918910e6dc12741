//! Configured experiments, comparisons and the verification suite.

pub mod config;
pub mod run;
pub mod verify;

pub use config::{parse_config, parse_config_str, Algorithm, ExperimentConfig, GameSource, RefSource, ScheduleSpec};
pub use run::{compare_algorithms, execute, run_experiment, write_comparison_csv, MetricRecord, RunSummary};
pub use verify::{verify, VerifyOptions, VerifyReport};
