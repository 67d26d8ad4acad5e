//! Experiment harness for speculative Jacobi decoding on toy models:
//! configuration, batch runs, sweeps, log analysis and the synthetic
//! theory checks. The `sjdvp` binary is a thin clap front end over this.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod overhead;
pub mod sweep;

pub use config::{DecoderKind, ExperimentConfig};
pub use error::{CliError, Result};
