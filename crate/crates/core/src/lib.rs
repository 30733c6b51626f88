//! Information bottleneck attribution for small convolutional classifiers.
//!
//! The crate contains a reverse-mode autodiff tensor layer, a trainable
//! conv net with tap points, the bottleneck attribution methods, a set of
//! baseline attribution methods, and the evaluation metrics used to compare
//! them.

pub mod baselines;
pub mod bottleneck;
pub mod error;
pub mod evaluation;
pub mod heatmap;
pub mod kernels;
pub mod methods;
pub mod network;
pub mod optim;
pub mod real;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
