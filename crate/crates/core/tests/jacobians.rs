//! Analytic Jacobians against central finite differences on the manifold.

mod common;

use nalgebra::{Vector2, Vector3};
use vical::camera::CameraIntrinsics;
use vical::factors::CameraReprojection;
use vical::solver::{BlockId, Factor};

use common::jacobians::*;

const TRIALS: usize = 500;
const REL_TOL: f64 = 1e-6;

#[test]
fn projection() {
    let worst = projection_jacobians(1000);
    println!("projection worst relative error {worst:e}");
    assert!(worst < REL_TOL);
}

#[test]
fn camera_reprojection() {
    let worst = camera_reprojection_jacobians(TRIALS);
    println!("camera reprojection worst relative error {worst:e}");
    assert!(worst < REL_TOL);
}

#[test]
fn vi_reprojection() {
    let worst = vi_reprojection_jacobians(TRIALS);
    println!("vi reprojection worst relative error {worst:e}");
    assert!(worst < REL_TOL);
}

#[test]
fn imu_factor_states() {
    let worst = imu_factor_state_jacobians(TRIALS);
    println!("imu factor worst relative error {worst:e}");
    assert!(worst < REL_TOL);
}

#[test]
fn imu_factor_time_delay() {
    let worst = imu_factor_time_delay_column(TRIALS);
    println!("t_d column worst relative error vs 5-point stencil {worst:e}");
    assert!(worst < 1e-4);
}

#[test]
fn reference_camera_has_no_extrinsics_block() {
    let cam = CameraIntrinsics::pinhole(500.0, 500.0, 320.0, 240.0, 640, 480);
    let f = CameraReprojection::new(BlockId(0), None, BlockId(1), cam, Vector3::zeros(), Vector2::zeros(), 1.0, None);
    assert_eq!(f.blocks(), &[BlockId(0), BlockId(1)]);
}

