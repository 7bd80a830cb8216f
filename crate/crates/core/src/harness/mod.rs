//! Experiment harness: datasets, metrics, configs, training loops and outputs.

pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod svg;
pub mod trace;
pub mod trainer;

pub use config::{
    DataSource, DatasetConfig, ExperimentConfig, LrPolicy, PruningConfig, RunConfig, ScoreKind,
};
pub use data::{Dataset, Samples, SyntheticSpec};
pub use experiment::{compare_schedulers, run_experiment, run_pretrain, run_prune};
pub use trace::{read_trace_csv, write_trace_csv, TraceRow};
pub use trainer::{AutoLrTrainer, FineTuner};
