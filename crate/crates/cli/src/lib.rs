//! Command-line pipeline around the `circlesnake` library: data preparation,
//! synthetic data, training, evaluation and inference.

pub mod commands;
pub mod config;
pub mod error;
pub mod render;

pub use commands::{
    cmd_evaluate, cmd_infer, cmd_prepare, cmd_synth, cmd_train, InferSummary, PrepareOptions, PrepareSummary,
    TrainOutcome,
};
pub use config::{BestMetric, RunConfig, Value};
pub use error::CliError;
