//! Command-line pipeline: corpus generation, training, profile synthesis,
//! evaluation and reports. Every command is a function of its config file,
//! its input artifacts and the seeds they name.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod failure;
pub mod manifest;

pub use commands::{run, Cli};
pub use config::RunConfig;
pub use failure::Failure;
pub use manifest::{RunManifest, StageStatus};
