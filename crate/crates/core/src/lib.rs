//! Datamodel-based data selection for imitation learning.
//!
//! A prior dataset of demonstrations is partitioned into clusters, a linear
//! datamodel estimates how much each cluster helps a target task, and the
//! highest-scoring clusters are co-trained with the few target
//! demonstrations. Everything runs on a small deterministic multi-task
//! point-mass environment ([`toyenv`]) with an MLP behavior-cloning policy
//! whose gradients and Hessian-vector products are exact ([`policy`]).
//!
//! Start with the examples directory; the `datamil` binary wraps
//! [`harness`] for command-line runs.

pub mod config;
pub mod dataset;
pub mod dual;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod policy;
pub mod proxy;
pub mod rng;
pub mod selection;
pub mod stats;
pub mod toyenv;
pub mod trainer;

pub use error::{Error, Result};
