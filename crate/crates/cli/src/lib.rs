//! Library side of the `hdgc` command-line tool: configuration, CSV
//! ingestion and the `simulate`, `fit` and `detect` verbs.

pub mod config;
pub mod detect_cmd;
pub mod error;
pub mod fit_cmd;
pub mod ingest;
pub mod output;
pub mod simulate_cmd;

pub use error::{CliError, CliResult};
