//! Single-stage anchor-free object detection, self-contained: a small
//! reverse-mode tensor engine, the detector family built on it (one baseline
//! plus six attention variants), losses, data pipeline, metrics, analytic
//! cost profiling, and deterministic training.
//!
//! Everything runs on the CPU with seeded RNG; identical inputs and seeds
//! produce identical weights, logs, and metrics.

pub mod attention;
pub mod ckpt;
pub mod cli;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod profile;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{backward, no_grad, DType, Scalar, Tensor};
