//! Decoupled value policy optimization at desk scale: synthetic token tasks,
//! offline value pretraining, frozen-critic policy optimization with
//! actor-critic and reward-only baselines, and exact tabular checks.

pub mod dataset;
pub mod env;
pub mod error;
pub mod eval;
pub mod gvm;
pub mod models;
pub mod rl;
pub mod seed;

pub use error::{LabError, Result};
