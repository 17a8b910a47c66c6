//! FLD+: a normalizing-flow likelihood metric for generated images.
//!
//! Real images are mapped through a frozen backbone, pooled and flattened
//! into feature vectors; a rational-quadratic spline flow is fit to those
//! features by maximum likelihood, and a generated set is scored by the
//! exponentiated ratio of its mean log-likelihood to the real set's.

mod binio;
pub mod distortions;
pub mod error;
pub mod experiments;
pub mod features;
pub mod flow;
pub mod metric;
pub mod nn;
pub mod provenance;
pub mod real;

pub use error::{Error, Result};
pub use real::{Precision, Real};
