//! Build analytic datasets from exposure events and outcome panels.

pub mod matching;
pub mod spline;
