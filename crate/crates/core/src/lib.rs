//! Rectified conditional flow matching for sequence generation.
//!
//! The pipeline: generate a synthetic text-to-frames corpus with a known
//! conditional distribution, train a flow-matching acoustic model on it,
//! straighten its sampling trajectories by flow rectification, and measure
//! the speed/quality tradeoff across ODE solver step budgets.

pub mod cfm;
pub mod cli;
pub mod data;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod ode;
pub mod rectify;

mod error;

pub use error::{Error, Result};
