//! Orchestration layer for the `dptq` command: run configuration,
//! checkpoints, run directories, reports and the pipeline commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
mod error;
pub mod report;
pub mod rundir;

pub use error::{LabError, LabResult};
