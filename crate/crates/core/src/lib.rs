//! Deterministic simulator for privacy-preserving, trust-verified,
//! fully decentralized multi-agent training.
//!
//! Agents hold disjoint data shards and train a shared classifier along a
//! chain, tree, or star ordering. A ledger-backed coordinator verifies every
//! submitted update against the median of peer evaluations before it may
//! propagate, per-step noise makes each update differentially private, and a
//! Rényi accountant tracks the privacy budget across rounds and topologies.

pub mod agent;
pub mod coordinator;
pub mod data;
pub mod dp;
pub mod error;
pub mod harness;
pub mod ledger;
pub mod model;
pub mod seed;
pub mod topology;

pub use error::{Error, Result};
