//! Experiment drivers and the data they run on.

pub mod faces;
pub mod monotonicity;
pub mod plot;
pub mod synthetic;
