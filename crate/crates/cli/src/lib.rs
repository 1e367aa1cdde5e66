//! Command-line driver: configuration, seed sweeps, ablations, overhead
//! accounting and deterministic CSV and SVG reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
pub mod records;
pub mod summary;
pub mod table;

pub use error::{CliError, CliResult};
