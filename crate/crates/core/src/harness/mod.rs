//! Experiment configuration, the staged pipeline and the command-line entry
//! point.

mod cli;
mod config;
mod pipeline;

pub use cli::run_cli;
pub use config::{
    apply_overrides, content_hash, load_config, parse_config, AugmentConfig, CamConfig, DataConfig, ExperimentConfig, Regime,
    SourceConfig,
};
pub use pipeline::{
    run_experiment, CamSummary, DataSummary, Failure, GanSummary, RegimeSummary, RunOptions, Stage, StageSummary,
    Summary, RECALL_THRESHOLD, SCHEMA_VERSION, SUMMARY_FILE,
};
