//! Optimization of 4D (space + time) neural radiance fields under hybrid
//! priors: direct supervision from a fixed-view reference video plus
//! score-distillation gradients from pluggable denoisers.
//!
//! The pipeline runs in two stages. A static stage fits the canonical field
//! to the first reference frame; a dynamic stage adds a deformation network
//! and a topology network on top of a shared 4D feature grid and trains
//! them under a prior-switching schedule.
//!
//! Analytic scenes in [`scenes`] stand in for generated reference videos and
//! provide ground truth for every quantity the pipeline renders.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod priors;
pub mod render;
pub mod run;
pub mod scenes;
pub mod trainer;

pub use error::{Error, Result};
