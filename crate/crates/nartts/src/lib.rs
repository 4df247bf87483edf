//! File formats, configuration, checkpoints and the training and synthesis
//! pipeline around `nartts-core`.

pub mod checkpoint;
pub mod config;
pub mod durations;
pub mod error;
pub mod features;
pub mod log;
pub mod manifest;
pub mod pipeline;

pub use error::{Error, Result};
