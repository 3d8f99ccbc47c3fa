//! NBV grid, NBT kinematics and fiducial initialization.

mod common;

use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;
use vical::camera::ProjectionModel;
use vical::config::NbvGridConfig;
use vical::geometry::{Frame, Pose, Quat};
use vical::guidance::init::{gravity_aligned_rotation, initialize_fiducial_pose, solve_pnp};
use vical::guidance::{build_nbv_grid, visible_fraction, Tilt};
use vical::imu::ImuMeasurement;
use vical::sim::RigSpec;
use vical::target::{simulate_detections, ImageTag};

use common::nbt::{endpoint_speeds, figure_eight_ratios, specs};

#[test]
fn nbv_grid_shape_and_visibility() {
    let rig = RigSpec::default_stereo();
    let grid = build_nbv_grid(&rig.target, &NbvGridConfig::default());
    assert_eq!(grid.len(), 135);
    let again = build_nbv_grid(&rig.target, &NbvGridConfig::default());
    assert_eq!(grid, again);
    let cam = rig.cameras[0];
    for c in &grid {
        let f = visible_fraction(&rig.target, &cam, &c.pose);
        assert!(f >= 0.8, "candidate {} ({:?}) sees {:.2}", c.id, c.tilt, f);
        let center = c.pose.inverse().transform_point(&rig.target.center());
        assert!(cam.project(&center).unwrap().visible);
    }
    let frontal = grid
        .iter()
        .find(|c| c.ix == 0 && c.iy == 0 && c.tilt == Tilt::Frontal)
        .unwrap();
    let px = cam.project(&frontal.pose.inverse().transform_point(&rig.target.center())).unwrap().pixel;
    assert!((px - Vector2::new(cam.cx, cam.cy)).norm() < 5.0);
}

#[test]
fn nbt_endpoints_at_rest() {
    let (analytic, numeric) = endpoint_speeds();
    assert!(analytic < 1e-12, "analytic {analytic}");
    assert!(numeric < 1e-6, "numeric {numeric}");
}

#[test]
fn figure_eight_ratios_are_two() {
    assert_eq!(figure_eight_ratios(), (2.0, 2.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn nbt_derivatives_match_numeric(which in 0usize..6, frac in 0.01f64..0.99) {
        let s = specs()[which];
        let k = frac * s.t_nbt;
        let h = 1e-6;
        let m = s.derivatives(k).unwrap();
        let (pp, pm) = (s.pose(k + h).unwrap(), s.pose(k - h).unwrap());
        let v = (pp.translation() - pm.translation()) / (2.0 * h);
        prop_assert!((v - m.velocity).norm() < 1e-6);
        // z = √(d − x² − y²) differentiated through x and y
        let p = s.pose(k).unwrap();
        let (x, y, z) = (p.translation().x, p.translation().y, p.translation().z);
        let dz = -(x * m.velocity.x + y * m.velocity.y) / z;
        prop_assert!((dz - v.z).abs() < 1e-6);
        let a = (s.derivatives(k + h).unwrap().velocity - s.derivatives(k - h).unwrap().velocity) / (2.0 * h);
        prop_assert!((a - m.acceleration).norm() < 1e-5);
        let w = pp.rotation().inverse().mul(pm.rotation()).log() / (-2.0 * h);
        prop_assert!((w - m.angular_velocity).norm() < 1e-6);
    }

    #[test]
    fn nbt_orientation_bounded(which in 0usize..6, frac in 0.0f64..=1.0) {
        let s = specs()[which];
        let r = s.rotation(frac * s.t_nbt).unwrap();
        let axis = r * Vector3::z();
        let angle = axis.dot(&-Vector3::z()).clamp(-1.0, 1.0).acos();
        prop_assert!(angle <= s.phi_bound + s.theta_bound + 1e-12);
    }
}

#[test]
fn nbt_start_substitution() {
    let s = specs().into_iter().find(|n| n.delta == 0.0).unwrap();
    let p = s.pose(0.0).unwrap();
    assert_eq!(p.translation().x, 0.5 * s.w_calib);
    assert_eq!(p.translation().y, s.h_traj + 0.5 * s.h_calib);
    let (t_mid, _) = (s.pose(0.5 * s.t_nbt).unwrap(), ());
    // t = 0.5 at the midpoint: φ = φ_b sin(π) + π
    let r = t_mid.rotation_matrix();
    let expect = vical::geometry::euler_xyz(s.phi_bound * PI.sin() + PI, s.theta_bound * PI.sin(), 0.0);
    assert!((r - expect).amax() < 1e-12);
}

fn static_imu(r_ws: &nalgebra::Matrix3<f64>, n: usize) -> Vec<ImuMeasurement> {
    let f = r_ws.transpose() * Vector3::new(0.0, 0.0, 9.81);
    (0..n)
        .map(|i| ImuMeasurement {
            stamp_ns: i as i64 * 2_500_000,
            gyro: Vector3::zeros(),
            accel: f,
        })
        .collect()
}

#[test]
fn gravity_alignment_recovers_roll_pitch() {
    let r_wc = vical::geometry::rot_y(-0.2) * vical::geometry::rot_x(0.3);
    let f_c = r_wc.transpose() * Vector3::new(0.0, 0.0, 9.81);
    let est = gravity_aligned_rotation(&f_c);
    let err = Quat::from_matrix(&est).angle_to(&Quat::from_matrix(&r_wc));
    assert!(err.to_degrees() < 0.01);
    // zero yaw: the world x-axis stays in the camera x-z plane projection
    assert!(est[(1, 0)].abs() < 1e-15);
}

#[test]
fn pnp_within_five_millimetres() {
    let rig = RigSpec::default_stereo();
    let cam = rig.cameras[0];
    let c = rig.target.center();
    let eye = c + Vector3::new(0.1, 0.05, 0.7);
    let r = vical::geometry::look_at(&eye, &c, &Vector3::y());
    let t_fc = Pose::from_matrix(Frame::Fiducial, Frame::Camera(0), &r, eye);
    let obs = simulate_detections(&rig.target, &cam, &t_fc.inverse(), 1.0, 7, ImageTag::default());
    assert_eq!(obs.len(), 144);
    let est = solve_pnp(&rig.target, &cam, &obs, 5.0, 1).unwrap();
    let (dt, _) = est.error_to(&t_fc);
    assert!(dt < 5e-3, "translation error {dt}");
}

#[test]
fn fiducial_initialization_at_rest() {
    let rig = RigSpec::default_stereo();
    let t_ws = rig.start_pose();
    let imu = static_imu(&t_ws.rotation_matrix(), 80);
    let t_wc_true = t_ws.compose(&rig.sensor_camera).unwrap();
    let t_cf = t_wc_true.inverse().compose(&rig.fiducial).unwrap();
    let obs = simulate_detections(&rig.target, &rig.cameras[0], &t_cf, 0.0, 0, ImageTag::default());
    let (t_wf, t_wc) =
        initialize_fiducial_pose(&rig.target, &rig.cameras[0], &[obs], &imu, &rig.sensor_camera, 0.1, 3).unwrap();
    // roll and pitch agree with the truth up to a yaw rotation about gravity
    let g_true = t_wc_true.rotation().inverse().rotate(&Vector3::z());
    let g_est = t_wc.rotation().inverse().rotate(&Vector3::z());
    assert!(g_true.angle(&g_est).to_degrees() < 0.01);
    assert_eq!(t_wc.translation(), &Vector3::zeros());
    let r = t_wc.rotation_matrix();
    assert!(r[(1, 0)].abs() < 1e-15, "yaw must be zero");
    let (dt, dr) = t_wf.compose(&t_cf.inverse()).unwrap().error_to(&t_wc);
    assert!(dt < 1e-9 && dr < 1e-9);

    // white noise averages out, a 1 Hz sway does not
    let long = static_imu(&t_ws.rotation_matrix(), 400);
    let mut noisy = long.clone();
    for (i, m) in noisy.iter_mut().enumerate() {
        m.accel.x += if i % 2 == 0 { 0.5 } else { -0.5 };
    }
    assert!(vical::guidance::init::motion_accel_std(&noisy) < 1e-12);
    let mut shaky = long.clone();
    for (i, m) in shaky.iter_mut().enumerate() {
        m.accel.x += 0.5 * (2.0 * PI * i as f64 * 0.0025).sin();
    }
    let err = initialize_fiducial_pose(&rig.target, &rig.cameras[0], &[vec![]], &shaky, &rig.sensor_camera, 0.1, 3);
    assert!(matches!(err, Err(vical::guidance::InitError::NotStatic { .. })));
    let err = initialize_fiducial_pose(&rig.target, &rig.cameras[0], &[vec![]], &imu, &rig.sensor_camera, 0.1, 3);
    assert!(matches!(err, Err(vical::guidance::InitError::RansacFailed { .. })));
}
