//! File formats and commands behind the `bmr` binary.

pub mod commands;
pub mod error;
pub mod ingest;
pub mod run_config;
