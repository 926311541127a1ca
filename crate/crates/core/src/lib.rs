//! Adversarial-attack testbed for optical-mark (bubble) classifiers.
//!
//! The crate bundles a small reverse-mode differentiation core with
//! selectable floating-point semantics, the classifiers and denoiser built on
//! it, white-box attacks, gradient diagnostics, a simulated print-scan
//! channel, and an election-impact calculator.

pub mod attacks;
pub mod channel;
pub mod data;
pub mod diagnostics;
pub mod impact;
pub mod error;
mod kernels;
pub mod models;
pub mod precision;
pub mod seed;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use precision::{round_reduced, PrecisionKind, PrecisionMode};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
