//! Differentially private relational learning over text-attributed graphs.
//!
//! The crate trains a small token-sequence encoder on relation tuples with
//! per-tuple clipping and Gaussian noise, accounts the privacy loss with a
//! Rényi accountant, and evaluates utility and membership leakage.

pub mod accountant;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod linalg;
pub mod memory;
pub mod mia;
pub mod objective;
pub mod optim;
pub mod privacy;
pub mod rng;
pub mod rr;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
