//! Semantic editing of segmentation maps with multi-expansion adversarial
//! losses: geometry, data preparation, networks, losses, training and
//! evaluation.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod par;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
