//! Configuration, checkpoints, experiment orchestration and gradient-check
//! suites behind the `metasgd` binary.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod output;
pub mod run;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{parse_config, parse_config_str, Experiment, RunConfig};
pub use error::CliError;
