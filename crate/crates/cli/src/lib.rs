//! Experiment runner for the evidential active-learning engine.
//!
//! The `evidal` binary is a thin clap front end over [`commands`] and
//! [`report`]; the same functions back the integration tests.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod serve;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
