//! Account-aware distribution discrepancy detection against model stealing.
//!
//! Queries are grouped per account into sliding windows, scored by how far
//! their per-class feature statistics drift from training references, and
//! answered with random labels once an account looks malicious.

pub mod calibration;
pub mod classifier;
pub mod detector;
pub mod error;
pub mod formats;
pub mod gateway;
pub mod metrics;
pub mod reference;
pub mod rng;
pub mod scenarios;
pub mod simulator;
pub mod tensor_stats;
pub mod windows;

pub use error::{Result, SentinelError};
