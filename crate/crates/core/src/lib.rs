//! Multi-scale attention fusion for semantic segmentation.
//!
//! A small shared trunk runs on every level of an image pyramid; fusion
//! strategies combine the per-scale products into one score map. The
//! bidirectional strategy fuses two halves of the trunk features along
//! opposite pathways across scales and concatenates the results.

pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod pyramid;
pub mod trainer;
pub mod cli;

pub use error::{Error, Result};
pub use fusion::StrategyId;
pub use model::{Model, ModelConfig};
