//! Sequence labeling with structure regularization.
//!
//! Linear-chain CRF and averaged structured perceptron trained by SGD,
//! where each epoch randomly decomposes training sequences into short
//! mini-samples (expected length `n'`) before sampling updates. The
//! `theory` module evaluates the closed-form stability, generalization
//! and convergence bounds that motivate the decomposition, and runs
//! leave-one-out probes that check their predicted trends empirically.

pub mod corpus;
pub mod decompose;
pub mod error;
pub mod eval;
pub mod features;
pub mod models;
pub mod rng;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
