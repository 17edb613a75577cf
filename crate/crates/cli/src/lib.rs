//! Run-directory pipeline around `vpc_core`: synthesize or ingest frames,
//! estimate inter-frame flows, sample pseudo-label corrections, derive
//! trajectories, adapt, and score.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use commands::{cmd_adapt, cmd_correct, cmd_flow, cmd_metrics, cmd_pipeline, cmd_synth, cmd_trajectory, Run};
pub use config::PipelineConfig;
pub use error::{CliError, CliResult};
