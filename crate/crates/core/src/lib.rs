//! Simulator for leakage detection units on small neutral-atom registers.

pub mod error;
pub mod circuits;
pub mod harness;
pub mod engine;
pub mod gates;
pub mod measure;
pub mod noise;
pub mod qstate;
pub mod stats;

pub use error::{LduError, Result};
