//! Broadcast processes on complete d-ary trees: sampling, exact oracles,
//! root estimators and unknown-tree reconstruction.

pub mod broadcast;
pub mod chains;
pub mod error;
pub mod harness;
pub mod exact_oracle;
pub mod phylo_sq;
pub mod rng;
pub mod root_estimators;
pub mod trees;

pub use error::{Error, Result};
