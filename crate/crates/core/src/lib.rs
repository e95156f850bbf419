//! Score-guided classification equilibrium for long-tailed recognition.
//!
//! The crate tracks a per-class mean classification score during training and
//! uses it twice: as pairwise margins in the equilibrium loss, and as inverse
//! sampling weights for a per-class feature memory. A synthetic long-tailed
//! world with a frozen feature extractor stands in for images and a detector
//! backbone, so the whole two-stage pipeline runs on a laptop.

pub mod box_geometry;
pub mod equilibrium_loss;
pub mod error;
pub mod experiment;
pub mod feature_memory;
pub mod metrics;
pub mod model;
pub mod report;
pub mod score_tracker;
pub mod seeding;
pub mod synthetic_world;
pub mod trainer;

pub use error::{Error, Result};
