//! Structured-sparsity filter pruning for small convolutional networks.
//!
//! The pipeline trains a network, solves a structured-sparsity regularized
//! problem per layer with an accelerated augmented-Lagrangian solver
//! ([`aulm`]), physically removes the zeroed filters ([`prune`]), and
//! accounts for the resulting FLOPs, parameters and latency ([`report`]).

pub mod aulm;
pub mod error;
pub mod nn;
pub mod prox;
pub mod prune;
pub mod report;
pub mod tensor;

pub use error::{Error, FormatError, Result};
