// validation guards use !(x > 0.0) so NaN is rejected along with
// non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! On-line identification of the dynamic single-diode PV array model.
//!
//! A PV array behind a switching converter sees a rippled current, which
//! turns the static five-parameter single-diode characteristic into a
//! first-order nonlinear system with an unmeasurable capacitor voltage.
//! This crate simulates that plant and identifies its five physical
//! parameters (C, Rp, Rs, I0, Iirr) online:
//!
//! * [`model`] - parameter algebra (physical <-> transformed coordinates),
//!   the operating-point catalog and the plant equations;
//! * [`simulator`] - ripple input and fixed-step integration;
//! * [`regressor`] - filtered reparameterization into a linear regression
//!   z = Omega' theta on measurable signals only;
//! * [`drem`] - dynamics extension, determinant/adjugate mixing and the
//!   per-parameter gradient estimators;
//! * [`reconstruct`] - recovery of the physical parameters from the
//!   estimates, with reporting clamps;
//! * [`harness`] - scenario runs, metrics and CSV/JSON outputs.

pub mod config;
pub mod drem;
pub mod error;
pub mod harness;
pub mod model;
pub mod reconstruct;
pub mod regressor;
pub mod simulator;

pub use error::{PvError, Result};
