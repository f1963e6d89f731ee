//! Simulation harness: truth surfaces, synthetic data, comparator fits and metrics.

pub mod datagen;
pub mod glm;
pub mod metrics;
pub mod study;
pub mod surface;
