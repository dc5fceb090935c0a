//! File formats, the language-model HTTP client, plots and the `teso`
//! command line on top of `teso-core`.

pub mod cli;
pub mod commands;
pub mod config_io;
pub mod cues;
pub mod dataset_io;
pub mod error;
pub mod fsutil;
pub mod layout;
pub mod llm;
pub mod logging;
pub mod plot;

pub use error::{CliError, Result};
pub use teso_core;
