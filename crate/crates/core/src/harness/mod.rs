//! Configuration, cycle orchestration, persistence and reporting.

pub mod config;
pub mod report;
pub mod run;
pub mod synth;

pub use config::{CycleConfig, DataConfig, ExperimentConfig};
pub use report::{report, ExperimentReport};
pub use run::{
    device_from_env, dry_run, run_experiment, score_pool, summarize_acquisition, AcquisitionSummary, CycleResult,
    RunInfo, RunLayout, RunLock, RunOptions,
};
pub use synth::{generate_synthetic, SynthConfig};
