//! `dpw-core`: a desk-scale workbench for differentially private training.
//!
//! The crate bundles the pieces needed to calibrate and sanity-check a
//! private training run before touching sensitive data:
//!
//! - [`nn`]: a small ReLU MLP with softmax cross-entropy, per-example
//!   gradients and momentum SGD.
//! - [`accountant`]: a Rényi-DP accountant for the Poisson-subsampled
//!   Gaussian mechanism, ε(δ) conversion, noise calibration and
//!   batch-size/noise tables.
//! - [`dp`]: the DPSGD step with fixed or adaptive per-group clipping.
//! - [`federated`]: a DP-FedAvg simulator with user-level clipping.
//! - [`data`]: synthetic datasets (random noise, injected patterns, blobs),
//!   Poisson batch sampling and a flat binary export format.
//! - [`harness`]: config-driven experiment commands used by the `dpw` CLI.
//!
//! Inner loops (batched forward passes, per-example backprop, per-user local
//! updates, table rows) run on rayon when the `parallel` feature is enabled
//! and fall back to plain iterators otherwise. Reductions always happen in a
//! fixed index order, so results are bit-identical across both builds.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod data;
pub mod dp;
pub mod error;
pub mod federated;
pub mod harness;
pub mod nn;
pub mod par;
pub mod rng;
pub mod tensor;

pub use error::{DpwError, Result};
pub use tensor::Tensor;
