//! File formats and the command-line driver around `pointlora-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod xyz;

pub use error::{Error, Result};
pub use pointlora_core as core;
