//! Local material recognition with global context.
//!
//! A small f64 tensor library with reverse-mode differentiation, a
//! fully-convolutional material network that accepts place and object
//! probabilities at a configurable layer, co-occurrence entropy analytics,
//! and a synthetic world whose Bayes-optimal accuracy is known exactly.

pub mod context;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod maps;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
