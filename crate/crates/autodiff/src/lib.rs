//! Reverse-mode automatic differentiation on a recording tape.
//!
//! Every op, including the ones that make up a backward pass, is recorded on
//! the [`Tape`]. Gradients returned by [`grad`] are therefore ordinary
//! recorded values, and differentiating a function of them yields second- and
//! higher-order derivatives. [`hvp`] and [`hvp_mixed`] build on this.
//!
//! ```
//! use dynloss_autodiff::{grad, Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.var(Tensor::scalar(2.0));
//! let y = x.square().unwrap().mul(&x).unwrap(); // x^3
//! let dy = grad(&y, &[&x]).unwrap().remove(0);
//! let d2y = grad(&dy, &[&x]).unwrap().remove(0);
//! assert_eq!(dy.item(), Some(12.0));
//! assert_eq!(d2y.item(), Some(12.0));
//! ```
//!
//! All values are `f64`. Any op that produces NaN or an infinity fails with
//! [`AdError::NonFinite`] naming the op and node.

mod backward;
mod error;
mod grad;
mod ops;
mod tape;
mod tensor;

pub use error::{AdError, Result};
pub use grad::{dot_const, grad, hvp, hvp_mixed};
pub use tape::{Checkpoint, Tape, Var};
pub use tensor::Tensor;
