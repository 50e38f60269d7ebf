//! Simulator for network function computation over MTC topologies.

pub mod field;
pub mod graph;
pub mod rng;
pub mod afc;
pub mod rlnc;
pub mod learning;
pub mod solvability;
pub mod engine;
