//! Experiment orchestration for the qolab lab: generate a world, train,
//! evaluate checkpoints and aggregate learning curves.
//!
//! An experiment is one TOML file. `generate` writes the catalog, workload and
//! latency model under `<output_dir>/artifacts/`; `train` writes metrics, a
//! final checkpoint and a run manifest under `<output_dir>/runs/<trainer>/`.

pub mod commands;
pub mod config;
mod error;

pub use commands::{cmd_eval, cmd_generate, cmd_report, cmd_train, EvalRequest, TrainOutput};
pub use config::{ExperimentConfig, TrainerKind};
pub use error::{CliError, CliResult};
