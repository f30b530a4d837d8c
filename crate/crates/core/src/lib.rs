//! Federated-learning simulator with a crafted-module inversion attack.
//!
//! A malicious server publishes a linear-leakage block to one victim client
//! and a zero-gradient block to everyone else. After a secure-aggregation
//! round the masked sum equals the victim's crafted-block update, from which
//! samples are recovered bin by bin in closed form.

pub mod craft;
pub mod data;
pub mod error;
pub mod fl;
pub mod harness;
pub mod math;
pub mod metrics;
pub mod models;
pub mod params;
pub mod reconstruct;

pub use error::{Error, Result};
