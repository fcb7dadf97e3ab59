//! Test-time adaptation of small vision transformers through their
//! spectral experts.
//!
//! Linear layers are factorized as `U diag(sigma) V^T`; only the singular
//! values are adapted online, under an entropy objective with a diversity
//! term over expert-input alignments. A domain bank keeps adapted codes
//! keyed by input statistics and restores them when a domain returns.

pub mod adapt;
pub mod bank;
pub mod error;
pub mod harness;
pub mod model;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
