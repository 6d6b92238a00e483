//! Run configuration, checkpoints, training runs and evaluation reports for
//! `ssa-core`, plus the pieces behind the `ssa` command line.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod report;
pub mod runner;

pub use checkpoint::Checkpoint;
pub use config::{EvalConfig, RunConfig, OUT_ROOT_ENV};
pub use error::{LabError, Result};
