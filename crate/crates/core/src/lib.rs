//! Desk-scale simulator for gradient-inversion attacks on FedSGD clients.
//!
//! A simulated malicious server crafts the parameters of a fully connected
//! ReLU classifier so that every sample's first-layer bias gradient is a
//! known per-class constant, then sweeps first-layer bias values across
//! communication rounds. Comparing consecutive gradient observations
//! isolates one input per bias strip, and the strip sequence inverts
//! exactly into the client's private batch. A randomized trap-weights
//! baseline and an exact convex-hull separability oracle provide the
//! comparison point and the theoretical ceiling for sparsity-based attacks.

pub mod attack;
pub mod data;
pub mod error;
pub mod federation;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod runner;
pub mod trap_weights;

pub use error::{Error, Result};
