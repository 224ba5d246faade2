//! Self-play reinforcement learning for segment-selective time-series
//! question answering.
//!
//! A single parameter set plays two roles. The controller repeatedly selects
//! a segment of the series or accepts the current answer; the reasoner answers
//! the question from the selected segments only. Trajectories are scored by
//! answer reliability and protocol compliance and both roles are trained with
//! group-relative policy gradients.

pub mod error;
pub mod eval;
pub mod exec;
pub mod io;
pub mod optimize;
pub mod policy;
pub mod protocol;
pub mod rewards;
pub mod rng;
pub mod rollout;
pub mod synthenv;
pub mod types;

pub use error::{Error, Result};
pub use exec::Execution;
