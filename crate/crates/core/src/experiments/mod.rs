//! Experiment orchestration: configuration, datasets, commands and the
//! self-check suite.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod verify;

pub use commands::{
    cmd_ablate, cmd_evaluate, cmd_generate, cmd_train, train_in_memory, AblationRow, EvalReport, RunResult, SplitName,
};
pub use config::ExperimentConfig;
pub use dataset::{generate_dataset, load_dataset, make_splits, Dataset, SplitIds};
