//! Dual control for exploration and exploitation (DCEE) of a longitudinal
//! vehicle whose optimal cruise speed is unknown and drifts over time.
//!
//! The controller keeps an ensemble of quadratic reward models, predicts how a
//! candidate traction force would move both the vehicle and the ensemble, and
//! picks the force minimizing tracking error plus posterior spread with a
//! Gauss-Newton solve on the stacked residual.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod plant;
pub mod problem;
pub mod reward;
pub mod solver;

pub use error::{DceeError, Result};
