//! Operator surface over `hyperstate-core`: episode runs, dataset
//! generation, tree scoring, offline evaluation and the policy simulator.

pub mod commands;
pub mod config;
pub mod eval;
pub mod scenario;
pub mod sim;

pub use commands::{execute, Cli, CliError};
