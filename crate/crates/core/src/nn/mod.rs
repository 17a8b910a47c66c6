//! Dense numerical core: tensors, the conditioner network with analytic
//! backpropagation, Adam, and finite-difference checking.

mod adam;
pub mod gradcheck;
mod mlp;
mod tensor;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_grad, finite_diff_jacobian, log_abs_det, relative_error};
pub use mlp::{Activation, ActivationCache, Dense, Mlp, MlpGrads};
pub use tensor::Tensor;
