//! Partial-label prompt-alignment testbed.
//!
//! A synthetic frozen dual encoder (linear text projection, fixed class
//! tokens) is trained through learnable context tokens under candidate-label
//! supervision. The crate provides eight training objectives, the
//! candidate-restricted posterior-mixing regularizer, candidate-set
//! generators, an analytic-gradient trainer with a finite-difference
//! verification suite, and a seeded sweep harness with CSV/JSON reporting.

pub mod alignment;
pub mod candidates;
pub mod encoder_sim;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod numerics;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
