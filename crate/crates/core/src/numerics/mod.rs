//! Dense linear algebra, manual-gradient layers, Adam, PRNG and gradient checking.

mod adam;
mod gradcheck;
pub mod layers;
mod matrix;
mod rng;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::grad_check;
pub use layers::{argmax, l2_normalize, l2_normalize_backward, log_softmax, softmax, LinearLayer};
pub use matrix::{dot, norm, DenseMatrix};
pub use rng::Rng;
