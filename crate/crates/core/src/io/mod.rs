//! On-disk formats, configuration and the stage drivers.

pub mod config;
pub mod dataset;
pub mod pipeline;
pub mod svol;

pub use config::PipelineConfig;
pub use dataset::{read_manifest, write_manifest};
