//! Rational-quadratic spline flow with exact log-likelihood.

mod actnorm;
mod checkpoint;
mod coupling;
mod model;
mod spline;
mod train;

pub use actnorm::ActNorm;
pub use checkpoint::{checkpoint_precision, load_flow, save_flow, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use coupling::{CouplingLayer, CouplingTape};
pub use model::{gaussian_log_density, FlowConfig, FlowGrads, FlowModel, FlowTape, Layer, LayerGrads, Pushforward};
pub use spline::{raw_backward, Direction, RqSplineParams, SplineShape};
pub use train::{train_flow, EpochRecord, TrainConfig, TrainLog, TrainOutcome};
