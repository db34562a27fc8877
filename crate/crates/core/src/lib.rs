//! Training a student network through a learned, evolving loss function.
//!
//! A dynamic loss network (DLN) scores the student's predictions. Its
//! parameters are updated by an LSTM teacher that reads hypergradients
//! obtained by differentiating a validation loss backward through the
//! student's unrolled SGD steps. The crate also carries a numerical check of
//! saddle escape for alternating block updates on quadratics, the dataset
//! utilities, and the experiment harness behind the `dynloss` binary.

pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod models;
pub mod optim;
pub mod params;
pub mod saddle;

pub use error::{Error, Result};
pub use params::ParamSet;
