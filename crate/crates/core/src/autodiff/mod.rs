//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] owns every value computed during one forward pass. Inputs
//! enter as [`Tape::param`] (gradient wanted) or [`Tape::constant`] leaves and
//! every method on [`Var`] records one primitive. [`Tape::backward`] walks the
//! record in reverse and accumulates `∂root/∂leaf` into the parameter leaves.
//!
//! ```
//! use viewseg::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
//! let y = x.mul(x).unwrap().sum();
//! y.backward().unwrap();
//! assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
//! ```

mod check;
mod kernels;
mod tape;
mod tensor;

pub use check::finite_difference_check;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
