//! Calibrated forecast intervals, reachable occupancy tubes and reach-avoid
//! planning for an ego vehicle among forecast agents.
//!
//! The pipeline per timestep:
//!
//! 1. a [`forecaster::Forecaster`] predicts each agent's next `h` controls and
//!    an uncertainty feature vector per step;
//! 2. a [`quantreg::QuantileBank`] maps the features to lower/upper error
//!    quantiles, which [`conformal`] widens by the rolling conformal parameter;
//! 3. [`reachability`] turns the resulting control boxes into time-indexed
//!    forward reachable tubes and projects them onto the plane;
//! 4. [`planner`] computes the ego's reach-avoid tube against those tubes and
//!    extracts a dynamically feasible plan.
//!
//! [`harness`] drives the loop over recorded scenarios and computes the
//! evaluation metrics.

pub mod config;
pub mod conformal;
pub mod dynamics;
pub mod error;
pub mod forecaster;
pub mod harness;
pub mod planner;
pub mod quantreg;
pub mod reachability;

pub use error::{Error, Result};
