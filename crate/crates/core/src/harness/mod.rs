//! Experiment configuration, seeded runs and result files.

mod config;
mod experiment;
mod results;

pub use config::{EnvironmentOverrides, ExperimentConfig, FleetConfig, GprlConfig, ModelConfig, TargetType};
pub use experiment::{
    build_transition_model, evaluate_policy, run_experiment, run_single, sample_fleet, value_grid, BuiltModel,
    ErrorRecord, FleetDiagnostic, ModelOptions, Rollout, RunResult,
};
pub use results::{
    correlation_files, quantile, read_results_csv, read_runs, summarize, summarize_dir, write_outputs,
    write_results_csv, CorrelationFile, CorrelationRun, ResultRow, Summary, TypeSummary, CONFIG_TOML, RESULTS_CSV,
    RUNS_JSON, SUMMARY_JSON,
};
