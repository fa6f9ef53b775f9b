//! Differentiable mixed-state multislice electron ptychography.
//!
//! The crate bundles a small reverse-mode autodiff tensor library, a
//! multislice ptychographic forward model, U-Net deep generative priors for
//! object and probe, regularizers and hard constraints, a reconstruction
//! engine, synthetic data generation, quantitative metrics, and a bit-exact
//! container format used by the command-line pipeline.

pub mod dgp;
pub mod engine;
pub mod error;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod physics;
pub mod simdata;
pub mod tensor;

pub use error::{FormatError, PtychoError, Result};
pub use tensor::{Dtype, Precision, Tensor};
