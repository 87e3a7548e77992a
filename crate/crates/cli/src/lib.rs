//! Front end for the genconv model: image files, configuration,
//! checkpoints and the train / sample / reconstruct / verify / info
//! workflows.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod pnm;

pub use checkpoint::Checkpoint;
pub use config::{Overrides, Preset, RunConfig};
pub use error::{CliError, Result};
