//! File formats, checkpoints, run manifests and the `sgm` command-line tool
//! built on [`sgm_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data_dir;
pub mod error;
pub mod formats;
pub mod fsio;
pub mod manifest;
pub mod reports;

pub use error::{Error, Result};
