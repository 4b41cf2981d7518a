//! Cross-study activation-map meta-analysis.
//!
//! Forward inference fits a term-occurrence GLM at every voxel; reverse
//! inference trains per-term classifiers on parcel-reduced maps and
//! evaluates them on studies never seen during training.

pub mod classify;
pub mod commands;
pub mod corpus;
pub mod cv;
pub mod diagnostics;
pub mod error;
pub mod glm;
pub mod parcel;
pub mod pipeline;
pub mod seed;
pub mod stats;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
