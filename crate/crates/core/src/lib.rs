//! Audit a black-box generative sequence model for use of unauthorized
//! training data.
//!
//! A prompt generator is trained against the frozen target model so that
//! the target reproduces each suspected value; values the target can
//! reproduce closely are flagged, ranked and scored.

pub mod audit;
mod container;
pub mod datagen;
pub mod experiment;
pub mod extreme_stats;
pub mod models;
pub mod training;

pub use container::ContainerError;
