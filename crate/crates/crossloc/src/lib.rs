//! Files, experiments and the command line around `crossloc-core`.

pub mod anchors_file;
pub mod annotations;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiments;
pub mod imageio;
pub mod render;
pub mod report;
pub mod synthetic;

pub use error::{Error, Result};
