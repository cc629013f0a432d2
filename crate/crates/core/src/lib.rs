//! Deterministic simulator for Byzantine-tolerant agreement on a shared
//! reference direction between nodes whose local frames differ by unknown
//! rotations, using qubit links for direction transfer.

pub mod adversaries;
pub mod classical_consensus;
pub mod geometry;
pub mod harness;
pub mod netsim;
pub mod quantum_link;
pub mod rf_protocols;

/// Index of a node in `0..m`.
pub type NodeId = usize;
