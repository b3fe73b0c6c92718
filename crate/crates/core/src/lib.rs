//! Simulator for community inference attacks against federated and gossip
//! training of recommender models.

pub mod attack;
pub mod data;
pub mod defenses;
pub mod error;
pub mod federated;
pub mod gossip;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod report;
pub mod runner;

pub use error::{Error, Result};
