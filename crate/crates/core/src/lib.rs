//! Coarse point refinement for point-supervised object localization.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod localizer;
pub mod nn;
pub mod pipeline;
pub mod refine;
pub mod refiner;
pub mod synth;
pub mod visualize;

pub use error::{Error, Result};
