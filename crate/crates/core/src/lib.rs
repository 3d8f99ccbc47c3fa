//! Guided visual-inertial calibration.

// `!(x > 0.0)` is used on purpose so that NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod camera;
pub mod config;
pub mod factors;
pub mod geometry;
pub mod guidance;
pub mod imu;
pub mod info;
pub mod session;
pub mod sim;
pub mod solver;
pub mod target;
