//! Core algorithms for comparing neural ensembles against deeper or wider
//! single networks under a fixed inference-FLOP budget.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature. Everything here is pure computation over in-memory values; file
//! formats, the run directory and the command line live in the `ensembench`
//! companion crate.
//!
//! Module map:
//!
//! - [`tensor`]: dense NHWC tensors with a reverse-mode tape, the operations
//!   needed by the four CNN families, a counter-based RNG and a finite
//!   difference gradient checker.
//! - [`zoo`]: architecture specs, builders, analytic FLOP/parameter counts,
//!   heads and losses.
//! - [`budget`]: design-space planning (ensemble size vs. deeper vs. wider).
//! - [`data`]: balanced subsampling, normalization, augmentation levels and
//!   synthetic fixtures.
//! - [`train`]: schedules, optimizers and independent-member ensemble training.
//! - [`eval`]: prediction averaging, accuracy aggregation and input-output
//!   Jacobian sensitivity.
//! - [`embed`]: exact 2D t-SNE over penultimate features.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod budget;
pub mod data;
pub mod embed;
mod error;
pub mod eval;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::{Element, RngStream, Tape, Tensor, Var};
