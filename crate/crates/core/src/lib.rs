//! Simulation of Moran metapopulations from the individual-based model down
//! to its deterministic and diffusive limits.

// `!(a > b)` is used on purpose to reject NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod canonical;
pub mod cli;
pub mod error;
pub mod exec;
pub mod exprlang;
pub mod kernels;
pub mod meanfield;
pub mod measure;
pub mod microsim;
pub mod replicator;
pub mod stats;
pub mod tss;

pub use error::{Error, Result};
