//! Command-line front end: scenario runner, benchmark harness with a
//! Paillier baseline, and crypto test vectors.

pub mod bench;
pub mod files;
pub mod paillier;
pub mod vectors;
