//! Exposure-duration varying coefficient model.

pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod gp;
pub mod grid;
pub mod hmc;
pub mod ingest;
pub mod io;
pub mod likelihood;
pub mod linalg;
pub mod posterior;
pub mod priors;
pub mod simulation;
pub mod summaries;

pub use error::{EdvcmError, Result};
