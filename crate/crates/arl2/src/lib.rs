//! Standard-library companion to `arl2-core`: run configurations, the
//! binary tensor format, CSV and JSON reports, curve fitting and the `arl2`
//! command-line tool.

pub mod blob;
pub mod commands;
pub mod config;
pub mod error;
pub mod fit;
pub mod scores;

pub use error::{CliError, Result};
