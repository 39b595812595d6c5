//! The `diffnet` command-line tool: synthetic tile generation, training,
//! prediction, per-site evaluation and confusion-map rendering.
//!
//! Every subcommand writes a JSON [`manifest::RunManifest`] beside its output;
//! `diffnet replay <manifest>` repeats the run.

pub mod args;
pub mod commands;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod render;

pub use args::Cli;
pub use commands::run;
pub use error::{CliError, Result};
