//! Data-driven distributionally robust MPC for linear systems under
//! additive disturbances with unknown distribution.

pub mod ambiguity;
pub mod conic;
pub mod controller;
pub mod cost;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod policy;
pub mod prediction;
pub mod terminal;
pub mod tightening;

pub use error::{DrmpcError, Result};
