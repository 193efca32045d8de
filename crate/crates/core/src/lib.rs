//! Provable simplification of piecewise-linear feed-forward networks.
//!
//! - [`net`]: network model, evaluation, JSON, and neuron removal.
//! - [`prop`]: sound per-neuron bounds over an input box.
//! - [`verify`]: branch-and-bound verifier for linear and argmax queries.
//! - [`redundancy`]: redundancy checks, replacement lines, error ledgers.
//! - [`pipeline`]: the end-to-end simplification pass.
//! - [`slice`]: input slicing into independently simplified sub-networks.

pub mod error;
pub mod fixtures;
pub mod net;
pub mod pipeline;
pub mod prop;
pub mod redundancy;
pub mod slice;
pub mod verify;

pub use error::{Error, Result};
