//! Numerical core of the fedx federated learning fabric.
//!
//! Everything here is a pure function of its inputs and an explicit seed:
//! the dense network engine, FedAvg, Laplace output perturbation, evaluation
//! metrics, synthetic site generators and the gradient-inversion lab.

pub mod aggregation;
pub mod blob;
mod codec;
pub mod data;
pub mod error;
pub mod inversion;
pub mod metrics;
pub mod privacy;
pub mod seed;
pub mod federation;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
