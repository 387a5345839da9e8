//! Fiber-bundle segmentation for histological brain sections.

pub mod augment;
pub mod config;
pub mod continuity;
pub mod domain;
pub mod error;
pub mod evaluate;
pub mod inference;
pub mod io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod synth;
pub mod trainer;

pub use config::RunConfig;
pub use domain::{BundleRegion, Mask, ProbabilityMap, Raster, Resolution, SectionRecord, Severity};
pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams, MultiTaskNet};
