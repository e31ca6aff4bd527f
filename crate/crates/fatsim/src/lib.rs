//! Desk-scale federated adversarial-training simulator.
//!
//! A miniature ViT-style classifier trained with PGD adversarial examples
//! across simulated federated clients, with pluggable aggregation
//! strategies (FedAvg, FedProx, FedGate, SCAFFOLD, FedWAvg) and per-round
//! accuracy / robust-accuracy / representation-drift reporting.

pub mod analysis;
pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod graph;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod report;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
