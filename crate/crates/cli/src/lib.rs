//! Experiment commands behind the `unlearn` binary: run, ablate, baseline and
//! emit-plots.

pub mod artifacts;
pub mod commands;
pub mod error;

pub use commands::{cmd_ablate, cmd_baseline, cmd_emit_plots, cmd_run, load_config, Overrides};
pub use error::{CliError, Result};
