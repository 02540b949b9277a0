//! Cross-view representation learning for temporal action segmentation.
//!
//! The crate trains a multi-stage dilated temporal convolutional network with
//! a Siamese predictor head on multi-view recordings. Besides the frame-wise
//! segmentation loss, two similarity objectives pull the representations of
//! synchronized views of one sequence (sequence loss) and of same-class action
//! segments seen from different cameras (action loss) together, which improves
//! segmentation on camera views never seen in training.
//!
//! All differentiable code is generic over [`Scalar`]; the aliases below fix
//! it to `f64`, which is what the trainer, the file formats and the CLI use.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Var<'t> = autodiff::Var<'t, f64>;
pub type ModelState = model::ModelState<f64>;
pub type Adam = optim::Adam<f64>;
