//! File formats, checkpoints, reports and the `cfdcam` command line on top
//! of [`cfdcam_core`].

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod heatmap;
pub mod report;
pub mod saliency_io;
pub mod volume_io;

pub use error::{exit, Error, Result};
